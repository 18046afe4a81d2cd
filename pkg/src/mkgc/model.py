"""Micro causal transformer with role-aware visibility masks."""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import Array, ContractError
from .rng import derive_rng
from .vocab import DEFAULT_MAX_SEQ_LEN, SerializedTriple

MASK_MODES = ("paper", "full_causal", "no_mask")
NEG_INF = -np.inf


@dataclass
class ModelConfig:
    vocab_size: int
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    max_seq_len: int = DEFAULT_MAX_SEQ_LEN
    mask_mode: str = "paper"
    tie_embeddings: bool = True
    init_std: float = 0.02

    def __post_init__(self):
        for name in ("vocab_size", "n_layers", "n_heads", "d_model", "d_ff", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ContractError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.mask_mode not in MASK_MODES:
            raise ContractError(f"mask_mode must be one of {MASK_MODES}, got {self.mask_mode!r}")


# masks -------------------------------------------------------------------------

def visibility(s: SerializedTriple, mode: str = "paper", length: int | None = None) -> np.ndarray:
    """Boolean ``[L, L]`` matrix, ``True`` where row position may attend to column position.

    ``length`` pads the matrix: padded keys are hidden from everyone and padded
    rows see only themselves.
    """
    if mode not in MASK_MODES:
        raise ContractError(f"unknown mask mode {mode!r}")
    n = len(s)
    L = n if length is None else length
    vis = np.zeros((L, L), dtype=bool)
    q = s.query_len
    if mode == "full_causal":
        vis[:n, :n] = np.tril(np.ones((n, n), dtype=bool))
    else:
        vis[:q, :q] = True
        vis[q:n, :q] = True
        vis[q:n, q:n] = np.tril(np.ones((n - q, n - q), dtype=bool))
        if mode == "paper":
            vis[s.pos_h, :] = False
            vis[s.pos_h, s.head_span[0]:s.head_span[1]] = True
            vis[s.pos_r, :] = False
            vis[s.pos_r, s.rel_span[0]:s.rel_span[1]] = True
            # [T] keeps its view of the whole query region
    idx = np.arange(L)
    vis[idx, idx] = True
    return vis


def build_visibility_mask(s: SerializedTriple, mode: str = "paper", length: int | None = None) -> np.ndarray:
    """Additive attention mask: 0 where attention is allowed, -inf where blocked."""
    return np.where(visibility(s, mode, length), 0.0, NEG_INF)


# weights -----------------------------------------------------------------------

def _param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes = [("tok_emb", (cfg.vocab_size, d)), ("pos_emb", (cfg.max_seq_len, d))]
    for i in range(cfg.n_layers):
        p = f"layer{i}."
        shapes += [
            (p + "ln1.w", (d,)), (p + "ln1.b", (d,)),
            (p + "attn.wq", (d, d)), (p + "attn.bq", (d,)),
            (p + "attn.wk", (d, d)), (p + "attn.bk", (d,)),
            (p + "attn.wv", (d, d)), (p + "attn.bv", (d,)),
            (p + "attn.wo", (d, d)), (p + "attn.bo", (d,)),
            (p + "ln2.w", (d,)), (p + "ln2.b", (d,)),
            (p + "ff.w1", (d, f)), (p + "ff.b1", (f,)),
            (p + "ff.w2", (f, d)), (p + "ff.b2", (d,)),
        ]
    shapes += [("ln_f.w", (d,)), ("ln_f.b", (d,))]
    if not cfg.tie_embeddings:
        shapes.append(("out_proj", (cfg.vocab_size, d)))
    return shapes


class TransformerLM:
    """Pre-norm transformer; ``forward`` returns final-layer-normed hidden states."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = derive_rng(seed, "init")
        self.params: dict[str, Array] = {}
        for name, shape in _param_shapes(cfg):
            if name.endswith(".w") and len(shape) == 1:
                data = np.ones(shape)
            elif len(shape) == 1:
                data = np.zeros(shape)
            else:
                std = cfg.init_std
                if name.endswith(("attn.wo", "ff.w2")):
                    std /= math.sqrt(2 * cfg.n_layers)
                data = rng.normal(0.0, std, size=shape)
            self.params[name] = Array(data, requires_grad=True, name=name)

    def parameters(self) -> list[Array]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    @property
    def output_weight(self) -> Array:
        return self.params["tok_emb" if self.cfg.tie_embeddings else "out_proj"]

    def forward(self, ids, mask: np.ndarray) -> Array:
        """Hidden states ``[B, L, d]`` for ids ``[B, L]`` and additive masks ``[B, L, L]``.

        A single sequence (1-d ids, 2-d mask) yields ``[L, d]``.
        """
        ids = np.asarray(ids, dtype=np.int64)
        single = ids.ndim == 1
        if single:
            ids, mask = ids[None], np.asarray(mask)[None]
        B, L = ids.shape
        if L > self.cfg.max_seq_len:
            raise ContractError(f"sequence length {L} exceeds max_seq_len={self.cfg.max_seq_len}")
        if mask.shape != (B, L, L):
            raise ContractError(f"mask shape {mask.shape} does not match ids {ids.shape}")
        P = self.params
        x = nx.embedding(P["tok_emb"], ids) + nx.take(P["pos_emb"], slice(0, L))
        attn_mask = mask[:, None, :, :]
        for i in range(self.cfg.n_layers):
            p = f"layer{i}."
            h = nx.layer_norm(x, P[p + "ln1.w"], P[p + "ln1.b"])
            x = x + self._attention(h, attn_mask, p)
            h = nx.layer_norm(x, P[p + "ln2.w"], P[p + "ln2.b"])
            h = nx.gelu(h @ P[p + "ff.w1"] + P[p + "ff.b1"])
            x = x + (h @ P[p + "ff.w2"] + P[p + "ff.b2"])
        out = nx.layer_norm(x, P["ln_f.w"], P["ln_f.b"])
        return out.reshape(L, self.cfg.d_model) if single else out

    def _attention(self, h: Array, attn_mask: np.ndarray, p: str) -> Array:
        P = self.params
        B, L, d = h.shape
        nh = self.cfg.n_heads
        dh = d // nh

        def heads(w, b):
            return (h @ P[p + w] + P[p + b]).reshape(B, L, nh, dh).transpose(0, 2, 1, 3)

        q, k, v = heads("attn.wq", "attn.bq"), heads("attn.wk", "attn.bk"), heads("attn.wv", "attn.bv")
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        probs = nx.softmax_rows(scores, attn_mask)
        ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(B, L, d)
        return ctx @ P[p + "attn.wo"] + P[p + "attn.bo"]

    def logits(self, hidden: Array) -> Array:
        """Vocabulary logits ``W h`` for each row of ``hidden``."""
        return hidden @ self.output_weight.transpose(1, 0)

    # persistence ---------------------------------------------------------------

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        return [(k, v.data) for k, v in self.params.items()]

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            src = arrays[name]
            if src.shape != p.shape:
                raise ContractError(f"parameter {name}: shape {src.shape} != {p.shape}")
            p.data = np.array(src, dtype=np.float64)
            p.grad = None


@dataclass
class EncodedTriple:
    hidden: Array
    serialized: SerializedTriple

    def __post_init__(self):
        if self.hidden.shape[0] != len(self.serialized):
            raise ContractError("hidden length does not match the serialized sequence")


def encode(model: TransformerLM, s: SerializedTriple, mode: str | None = None) -> EncodedTriple:
    mask = build_visibility_mask(s, mode or model.cfg.mask_mode)
    return EncodedTriple(model.forward(np.array(s.ids), mask), s)


def extract_role_states(e: EncodedTriple) -> tuple[Array, Array, Array]:
    s = e.serialized
    for name in ("pos_h", "pos_r", "pos_t"):
        pos = getattr(s, name)
        if pos is None or not 0 <= pos < len(s):
            raise ContractError(f"role marker {name} missing from the sequence")
    return e.hidden[s.pos_h], e.hidden[s.pos_r], e.hidden[s.pos_t]


def next_token_logits(e: EncodedTriple, i: int, model: TransformerLM) -> Array:
    """Logits for the token at position ``i``, read from the state at ``i - 1``."""
    if i < 1 or i > len(e.serialized):
        raise ContractError(f"next-token position must lie in [1, {len(e.serialized)}], got {i}")
    return model.logits(e.hidden[i - 1:i]).reshape(-1)


# checkpoints ---------------------------------------------------------------------

_MAGIC = b"MKGCCKPT"


def save_checkpoint(path, model: TransformerLM, header: dict, extra: list[tuple[str, np.ndarray]] = ()) -> None:
    """Write ``MAGIC | u64 header length | JSON header | little-endian float64 blob``.

    The header lists every array (name, shape) in blob order.
    """
    arrays = list(model.state_arrays()) + list(extra)
    head = dict(header)
    head["model_config"] = asdict(model.cfg)
    head["arrays"] = [{"name": n, "shape": list(a.shape)} for n, a in arrays]
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    head["blob_sha256"] = hashlib.sha256(blob).hexdigest()
    raw = json.dumps(head, sort_keys=True, ensure_ascii=False).encode("utf-8")
    Path(path).write_bytes(_MAGIC + struct.pack("<Q", len(raw)) + raw + blob)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ContractError(f"{path} is not a checkpoint file")
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + n].decode("utf-8"))
    blob = data[16 + n:]
    if hashlib.sha256(blob).hexdigest() != header["blob_sha256"]:
        raise ContractError(f"{path}: parameter blob is corrupt")
    arrays, offset = {}, 0
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arrays[entry["name"]] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += 8 * count
    return header, arrays


def load_model(path) -> tuple[TransformerLM, dict, dict[str, np.ndarray]]:
    header, arrays = read_checkpoint(path)
    model = TransformerLM(ModelConfig(**header["model_config"]))
    model.load_state_arrays(arrays)
    return model, header, arrays
