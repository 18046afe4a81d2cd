"""Batching, in-batch negatives and the training loop."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .kgdata import DatasetSplit, KnowledgeGraph, Triple
from .model import ModelConfig, TransformerLM, build_visibility_mask, read_checkpoint, save_checkpoint
from .numerics import ContractError
from .objectives import LossWeights, generation_loss, global_loss, local_loss, total_loss, TrainingAbort
from .rng import derive_rng
from .vocab import SerializedTriple, Vocabulary, serialize_triple

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 3e-4
    batch_size: int = 128
    epochs: int = 50
    seed: int = 0
    optimizer: str = "adam"
    weights: LossWeights = field(default_factory=LossWeights)
    mask_mode: str = "paper"
    checkpoint_every: int = 0
    eval_every: int = 0
    patience: int = 0
    component_grad_norms: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ContractError("lr must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ContractError("batch_size must be >= 1 and epochs >= 0")
        if self.weights.beta > 0 and self.batch_size < 2:
            raise ContractError("batch_size must be at least 2 when beta > 0 (in-batch negatives)")
        if self.optimizer not in ("adam", "sgd"):
            raise ContractError("optimizer must be 'adam' or 'sgd'")


@dataclass
class Example:
    triple: Triple
    seq: SerializedTriple


@dataclass
class Batch:
    ids: np.ndarray            # [B, L] int, right-padded
    mask: np.ndarray           # [B, L, L] additive
    pos_h: np.ndarray
    pos_r: np.ndarray
    pos_t: np.ndarray
    query_pool: np.ndarray     # [B, L], 1/|Q| on head and relation subtokens
    target_rows: np.ndarray    # per target token: example index
    target_src: np.ndarray     # per target token: position of the predicting state
    target_ids: np.ndarray
    langs: list[str]
    triples: list[Triple]

    def __len__(self) -> int:
        return len(self.triples)


def serialize_examples(g: KnowledgeGraph, triples: Sequence[Triple], vocab: Vocabulary,
                       max_seq_len: int) -> list[Example]:
    return [Example(t, serialize_triple(g.entities[t.head], g.relations[t.relation], g.entities[t.tail],
                                        vocab, max_seq_len)) for t in triples]


def collate(examples: Sequence[Example], pad_id: int, mask_mode: str = "paper") -> Batch:
    B = len(examples)
    L = max(len(e.seq) for e in examples)
    ids = np.full((B, L), pad_id, dtype=np.int64)
    mask = np.empty((B, L, L))
    pool = np.zeros((B, L))
    rows, src, tgt = [], [], []
    for b, ex in enumerate(examples):
        s = ex.seq
        ids[b, : len(s)] = s.ids
        mask[b] = build_visibility_mask(s, mask_mode, L)
        q = list(range(*s.head_span)) + list(range(*s.rel_span))
        if q:
            pool[b, q] = 1.0 / len(q)
        for i in range(s.query_len, len(s)):
            rows.append(b)
            src.append(i - 1)
            tgt.append(s.ids[i])
    return Batch(ids, mask,
                 np.array([e.seq.pos_h for e in examples]),
                 np.array([e.seq.pos_r for e in examples]),
                 np.array([e.seq.pos_t for e in examples]),
                 pool, np.array(rows), np.array(src), np.array(tgt),
                 [e.triple.lang for e in examples], [e.triple for e in examples])


def batch_order(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    perm = derive_rng(seed, "batches", epoch).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def make_batches(examples: Sequence[Example], batch_size: int, seed: int, epoch: int,
                 pad_id: int, mask_mode: str = "paper") -> list[Batch]:
    """One epoch of shuffled batches; languages mix freely and every example appears once."""
    if not examples:
        raise ContractError("no training examples")
    return [collate([examples[i] for i in idx], pad_id, mask_mode)
            for idx in batch_order(len(examples), batch_size, seed, epoch)]


def negative_sampler(n: int, rng: np.random.Generator) -> np.ndarray | None:
    """Uniform random derangement of ``range(n)``; ``None`` for n < 2 (no negatives)."""
    if n < 2:
        return None
    # rejection sampling; acceptance rate tends to 1/e
    while True:
        p = rng.permutation(n)
        if not np.any(p == np.arange(n)):
            return p


# one step ---------------------------------------------------------------------------------

def compute_losses(model: TransformerLM, batch: Batch, weights: LossWeights, pairing):
    hidden = model.forward(batch.ids, batch.mask)
    l_g = generation_loss(model, hidden, batch.target_rows, batch.target_src, batch.target_ids)
    ar = np.arange(len(batch))
    h_h = hidden[ar, batch.pos_h]
    h_r = hidden[ar, batch.pos_r]
    h_t = hidden[ar, batch.pos_t]
    l_p = global_loss(h_h, h_r, h_t, weights, pairing)
    l_e = local_loss(hidden, batch.query_pool, batch.pos_t, pairing, weights.jsd_form)
    return l_g, l_p, l_e


def train_step(model: TransformerLM, batch: Batch, weights: LossWeights, pairing, optimizer,
               component_grad_norms: bool = True):
    params = model.parameters()
    with nx.Tape() as tape:
        l_g, l_p, l_e = compute_losses(model, batch, weights, pairing)
        total, report = total_loss(l_g, l_p, l_e, weights)
    grads = tape.gradients(total, params)
    report.grad_norms["total"] = nx.grad_norm(grads)
    if component_grad_norms:
        for name, comp, w in (("l_g", l_g, 1.0), ("l_p", l_p, weights.alpha), ("l_e", l_e, weights.beta)):
            if comp is not None and w:
                report.grad_norms[name] = w * nx.grad_norm(tape.gradients(comp, params))
    for p, g in zip(params, grads):
        p.grad = g
    optimizer.step()
    return report


def make_optimizer(model: TransformerLM, cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return nx.SGDState(model.parameters(), cfg.lr)
    return nx.OptimizerState(model.parameters(), cfg.lr)


# loop -----------------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: TransformerLM
    log: list[dict]
    checkpoint: Path | None = None
    best_epoch: int | None = None
    aborted: str | None = None


def _ckpt_header(cfg: TrainConfig, vocab: Vocabulary, step: int, epoch: int, opt) -> dict:
    cfg_d = asdict(cfg)
    return {"format": 1, "step": step, "epoch": epoch, "optimizer_step": opt.t,
            "train_config": cfg_d, "vocab": vocab.to_json(), "vocab_hash": vocab.fingerprint()}


def save_training_checkpoint(path, model, cfg, vocab, step, epoch, opt) -> None:
    extra = [(f"opt.{i}", a) for i, a in enumerate(opt.state_arrays())]
    save_checkpoint(path, model, _ckpt_header(cfg, vocab, step, epoch, opt), extra)


def _restore(path, model, opt) -> tuple[int, int]:
    header, arrays = read_checkpoint(path)
    model.load_state_arrays(arrays)
    opt_arrays = [arrays[k] for k in sorted((k for k in arrays if k.startswith("opt.")),
                                            key=lambda k: int(k.split(".")[1]))]
    opt.load_state_arrays(opt_arrays, header["optimizer_step"])
    return header["step"], header["epoch"]


def train(g: KnowledgeGraph, split: DatasetSplit, vocab: Vocabulary, cfg: TrainConfig,
          model_cfg: ModelConfig, out_dir=None, resume=None,
          validate: Callable[[TransformerLM], float] | None = None) -> TrainResult:
    """Train on ``split.train``; writes ``train_log.jsonl`` and checkpoints under ``out_dir``.

    ``validate`` (model -> validation Hits@1) enables best-checkpoint selection every
    ``cfg.eval_every`` epochs with ``cfg.patience`` non-improving evaluations allowed.
    """
    if model_cfg.mask_mode != cfg.mask_mode:
        model_cfg = replace(model_cfg, mask_mode=cfg.mask_mode)
    examples = serialize_examples(g, split.all_train(), vocab, model_cfg.max_seq_len)
    if not examples:
        raise ContractError("training split is empty")
    model = TransformerLM(model_cfg, cfg.seed)
    opt = make_optimizer(model, cfg)
    step, start_epoch = 0, 0
    if resume is not None:
        step, start_epoch = _restore(resume, model, opt)

    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.jsonl", "a" if resume is not None else "w", encoding="utf-8")
    records: list[dict] = []
    best = (-1.0, None, None)  # (hits, epoch, state)
    bad_evals = 0
    aborted = None
    snapshots: list[list[np.ndarray]] = []
    try:
        for epoch in range(start_epoch, cfg.epochs):
            for batch in make_batches(examples, cfg.batch_size, cfg.seed, epoch, vocab.pad, cfg.mask_mode):
                pairing = negative_sampler(len(batch), derive_rng(cfg.seed, "negatives", step))
                snapshots = (snapshots + [[p.data.copy() for p in model.parameters()]])[-2:]
                try:
                    report = train_step(model, batch, cfg.weights, pairing, opt, cfg.component_grad_norms)
                except TrainingAbort as exc:
                    aborted = str(exc)
                    log.error("aborting at step %d: %s", step, exc)
                    # the current parameters produced the bad loss; fall back to the
                    # ones evaluated at the previous step
                    for p, data in zip(model.parameters(), snapshots[0]):
                        p.data = data
                    break
                rec = {"step": step, "epoch": epoch, "lr": cfg.lr, **report.to_dict()}
                records.append(rec)
                if log_fh is not None:
                    log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
                step += 1
            if aborted:
                break
            if out is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_training_checkpoint(out / f"ckpt_epoch{epoch + 1}.bin", model, cfg, vocab, step, epoch + 1, opt)
            if validate is not None and cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
                score = validate(model)
                if score > best[0]:
                    best = (score, epoch + 1, [p.data.copy() for p in model.parameters()])
                    bad_evals = 0
                else:
                    bad_evals += 1
                    if cfg.patience and bad_evals >= cfg.patience:
                        break
    finally:
        if log_fh is not None:
            log_fh.close()

    best_epoch = None
    if best[2] is not None:
        for p, data in zip(model.parameters(), best[2]):
            p.data = data
        best_epoch = best[1]
    ckpt = None
    if out is not None:
        ckpt = out / "model.bin"
        save_training_checkpoint(ckpt, model, cfg, vocab, step, best_epoch or cfg.epochs, opt)
    return TrainResult(model, records, ckpt, best_epoch, aborted)
