"""Generation, global (translational) and local (Jensen-Shannon MI) losses."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import Array, ContractError

SCORE_VARIANTS = ("transe_l1", "transe_l2", "rotate", "complex")
LN2 = math.log(2.0)


class TrainingAbort(RuntimeError):
    def __init__(self, component: str, value: float):
        super().__init__(f"loss component {component} is not finite ({value})")
        self.component = component


@dataclass
class LossWeights:
    alpha: float = 0.001
    beta: float = 0.005
    gamma: float = 0.0
    score_variant: str = "transe_l1"
    # use max(0, score_pos - score_neg + gamma) with in-batch corrupted tails
    global_margin: bool = False
    # "standard": E[-sp(-T_pos)] - E[sp(T_neg)];  "printed": E[-sp(T_pos)] - E[sp(T_neg)]
    jsd_form: str = "standard"

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ContractError("alpha and beta must be non-negative")
        if self.score_variant not in SCORE_VARIANTS:
            raise ContractError(f"score_variant must be one of {SCORE_VARIANTS}")
        if self.jsd_form not in ("standard", "printed"):
            raise ContractError("jsd_form must be 'standard' or 'printed'")


@dataclass
class LossReport:
    l_g: float
    l_p: float
    l_e: float
    total: float
    alpha: float
    beta: float
    grad_norms: dict[str, float] = field(default_factory=dict)
    local_skipped: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


# generation ----------------------------------------------------------------------

def generation_loss(model, hidden: Array, rows, src_pos, targets) -> Array:
    """Mean negative log-likelihood of tail-region targets.

    ``rows``/``src_pos`` pick the hidden state that predicts each target
    (position ``i - 1`` for the token at ``i``).
    """
    targets = np.asarray(targets)
    if targets.size == 0:
        raise ContractError("generation loss over an empty target region")
    states = hidden[np.asarray(rows), np.asarray(src_pos)]
    return nx.cross_entropy(model.logits(states), targets)


# global constraint -------------------------------------------------------------------

def _halves(x: Array) -> tuple[Array, Array]:
    d = x.shape[-1]
    if d % 2:
        raise ContractError(f"complex-valued scores need an even dimension, got {d}")
    return x[..., : d // 2], x[..., d // 2:]


def global_score(h_head, h_rel, h_tail, variant: str = "transe_l1") -> Array:
    """Plausibility distance of role states; lower means more plausible.

    Complex variants read a vector as ``[real half | imaginary half]``; RotatE
    uses the relation's first half as rotation phases.
    """
    h, r, t = nx.as_array(h_head), nx.as_array(h_rel), nx.as_array(h_tail)
    if not h.shape == r.shape == t.shape:
        raise nx.DimensionError(f"role states differ in shape: {h.shape}, {r.shape}, {t.shape}")
    if variant == "transe_l1":
        return nx.l1_norm(h + r - t)
    if variant == "transe_l2":
        return nx.l2_norm(h + r - t)
    if variant == "rotate":
        h_re, h_im = _halves(h)
        t_re, t_im = _halves(t)
        phase, _ = _halves(r)
        c, s = nx.cos(phase), nx.sin(phase)
        d_re = h_re * c - h_im * s - t_re
        d_im = h_re * s + h_im * c - t_im
        return nx.sqrt(d_re * d_re + d_im * d_im).sum(axis=-1)
    if variant == "complex":
        h_re, h_im = _halves(h)
        r_re, r_im = _halves(r)
        t_re, t_im = _halves(t)
        tri = h_re * r_re * t_re + h_im * r_re * t_im + h_re * r_im * t_im - h_im * r_im * t_re
        return -tri.sum(axis=-1)
    raise ContractError(f"unknown score variant {variant!r}")


def global_loss(h_head: Array, h_rel: Array, h_tail: Array, weights: LossWeights,
                pairing: np.ndarray | None = None) -> Array:
    """Batch mean of ``score + gamma``.

    With ``weights.global_margin`` and a ``pairing`` (derangement over the batch),
    the loss becomes ``max(0, score_pos - score_neg + gamma)`` where the negative
    swaps in another example's tail state.
    """
    if h_head.shape[0] == 0:
        raise ContractError("global loss over an empty batch")
    pos = global_score(h_head, h_rel, h_tail, weights.score_variant)
    if weights.global_margin and pairing is not None:
        neg = global_score(h_head, h_rel, h_tail[np.asarray(pairing)], weights.score_variant)
        return nx.relu(pos - neg + weights.gamma).mean()
    return (pos + weights.gamma).mean()


# local constraint ----------------------------------------------------------------------

def discriminator(query_states: Array, tail_state: Array) -> Array:
    """Mean over query positions of ``<h_q, h_T> / sqrt(d)``."""
    d = tail_state.shape[-1]
    return (query_states @ tail_state.reshape(d, 1)).mean() * (1.0 / math.sqrt(d))


def jsd_from_scores(t_pos: Array, t_neg: Array, form: str = "standard") -> Array:
    pos_term = -nx.softplus(-t_pos) if form == "standard" else -nx.softplus(t_pos)
    return pos_term.mean() - nx.softplus(t_neg).mean()


def jsd_mi_estimate(query_states, tail_state, neg_query_states, form: str = "standard") -> Array:
    """Jensen-Shannon MI lower-bound estimate for one query/tail pair and one negative query."""
    q, t, qn = nx.as_array(query_states), nx.as_array(tail_state), nx.as_array(neg_query_states)
    if q.shape[0] == 0 or qn.shape[0] == 0:
        raise ContractError("MI estimate needs a non-empty query region")
    return jsd_from_scores(discriminator(q, t), discriminator(qn, t), form)


def pooled_scores(hidden: Array, query_pool: np.ndarray, pos_t, pairing) -> tuple[Array, Array]:
    """Discriminator scores for positive pairs and in-batch negatives.

    ``query_pool`` is ``[B, L]`` with ``1/|Q_i|`` on example i's head and relation
    subtoken positions, so pooling then dotting equals the mean of dot products.
    """
    B, L, d = hidden.shape
    if np.any(query_pool.sum(axis=1) == 0):
        raise ContractError("MI estimate needs a non-empty query region")
    pooled = (nx.as_array(query_pool[:, None, :]) @ hidden).reshape(B, d)
    h_t = hidden[np.arange(B), np.asarray(pos_t)]
    scale = 1.0 / math.sqrt(d)
    t_pos = (pooled * h_t).sum(axis=-1) * scale
    t_neg = (pooled[np.asarray(pairing)] * h_t).sum(axis=-1) * scale
    return t_pos, t_neg


def local_loss(hidden: Array, query_pool: np.ndarray, pos_t, pairing, form: str = "standard") -> Array | None:
    """Negated JSD estimate over the batch; ``None`` when no negatives exist (batch of one)."""
    if pairing is None or hidden.shape[0] < 2:
        return None
    pairing = np.asarray(pairing)
    if np.any(pairing == np.arange(len(pairing))):
        raise ContractError("negative pairing has a fixed point")
    t_pos, t_neg = pooled_scores(hidden, query_pool, pos_t, pairing)
    return -jsd_from_scores(t_pos, t_neg, form)


# composition -----------------------------------------------------------------------------

def total_loss(l_g: Array, l_p: Array | None, l_e: Array | None, weights: LossWeights) -> tuple[Array, LossReport]:
    """``l_g + alpha * l_p + beta * l_e``; zero-weighted terms stay out of the graph."""
    values = {"l_g": l_g, "l_p": l_p, "l_e": l_e}
    for name, v in values.items():
        if v is not None and not np.isfinite(v.data).all():
            raise TrainingAbort(name, float(v.data))
    total = l_g
    if weights.alpha and l_p is not None:
        total = total + l_p * weights.alpha
    if weights.beta and l_e is not None:
        total = total + l_e * weights.beta
    report = LossReport(
        l_g=l_g.item(),
        l_p=0.0 if l_p is None else l_p.item(),
        l_e=0.0 if l_e is None else l_e.item(),
        total=total.item(),
        alpha=weights.alpha,
        beta=weights.beta,
        local_skipped=l_e is None,
    )
    return total, report
