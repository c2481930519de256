"""Loss functions for two-branch mutual learning.

Implements the three-head objective used throughout the package: per-branch
cross-entropy, a KL mimicry term that pulls a branch's predictions toward its
peer's, a truncated variant of that term, and the weighted total.

The truncated mimicry keeps only the non-negative summands of the KL sum, so
the peer contributes pressure only on classes where it assigns *more*
probability than the current branch; everything the peer is less sure about
is dropped instead of being transferred as negative knowledge.

All operations accept single probability/logit vectors (shape ``(K,)``) or
batches (shape ``(..., K)``), reduce over the last axis only, and are pure:
no global state is read or written.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .errors import InvalidConfigError, InvalidInputError

__all__ = [
    "EPSILON",
    "LossBreakdown",
    "LossWeights",
    "clip_probs",
    "cross_entropy",
    "kld",
    "modality_loss",
    "softmax",
    "total_loss",
    "tr_kld_reg",
    "tr_kld_reg_grad",
    "weighted_total",
]

# Probabilities are clamped into [EPSILON, 1] before any log so a degenerate
# one-hot prediction cannot produce an infinite loss.
EPSILON = 1e-7

# Validation slack on "rows sum to 1": wide enough for float32 softmax output,
# far below anything a genuinely unnormalized vector would pass.
_SUM_ATOL = 1e-5


def _as_float_tensor(values, name: str) -> Tensor:
    t = torch.as_tensor(values)
    if t.is_floating_point():
        pass
    elif t.dtype in (torch.int8, torch.int16, torch.int32, torch.int64, torch.uint8):
        t = t.to(torch.float64)
    else:
        raise InvalidInputError(f"{name} must be a real-valued tensor, got dtype {t.dtype}")
    if t.ndim < 1 or t.shape[-1] < 2:
        raise InvalidInputError(f"{name} must have at least 2 classes on the last axis")
    if not torch.isfinite(t).all():
        raise InvalidInputError(f"{name} contains non-finite entries")
    return t


def _check_probs(values, name: str) -> Tensor:
    t = _as_float_tensor(values, name)
    if bool((t < -_SUM_ATOL).any()) or bool((t > 1.0 + _SUM_ATOL).any()):
        raise InvalidInputError(f"{name} entries must lie in [0, 1]")
    sums = t.sum(dim=-1)
    if bool(((sums - 1.0).abs() > _SUM_ATOL).any()):
        raise InvalidInputError(f"{name} rows must sum to 1")
    return t


def clip_probs(probs: Tensor) -> Tensor:
    """Clamp probabilities into ``[EPSILON, 1]`` so logs stay finite."""
    return probs.clamp(min=EPSILON, max=1.0)


def softmax(logits) -> Tensor:
    """Max-shifted softmax over the last axis.

    Order-preserving: the argmax of the input is the argmax of the output.
    """
    t = _as_float_tensor(logits, "logits")
    return torch.softmax(t, dim=-1)


def cross_entropy(probs, label) -> Tensor:
    """``-log p[label]`` per row, with ``p`` clipped first.

    ``label`` is an integer class index (or an integer tensor matching the
    batch shape of ``probs``).  Out-of-range indices raise
    :class:`InvalidInputError`.
    """
    p = _check_probs(probs, "probs")
    y = torch.as_tensor(label)
    if y.is_floating_point():
        raise InvalidInputError("label must be an integer class index")
    k = p.shape[-1]
    if bool((y < 0).any()) or bool((y >= k).any()):
        raise InvalidInputError(f"label out of range for K={k}")
    picked = clip_probs(p).gather(-1, y.long().unsqueeze(-1)).squeeze(-1)
    return -picked.log()


def _divergence_parts(p_target, p_current):
    pt = _check_probs(p_target, "p_target")
    pc = _check_probs(p_current, "p_current")
    if pt.shape[-1] != pc.shape[-1]:
        raise InvalidInputError(
            f"length mismatch: p_target has K={pt.shape[-1]}, p_current has K={pc.shape[-1]}"
        )
    pt_c = clip_probs(pt)
    pc_c = clip_probs(pc)
    log_ratio = pt_c.log() - pc_c.log()
    # An exactly-zero target entry contributes 0 to the sum (0*log 0 = 0).
    support = pt > 0
    return pt_c, pc_c, log_ratio, support


def kld(p_target, p_current) -> Tensor:
    """Kullback-Leibler divergence ``sum_k p_t[k] * log(p_t[k]/p_c[k])``.

    Both arguments are clipped to ``[EPSILON, 1]`` before the log.  The
    result is clamped at 0: clipping can leave a residue of order
    ``-K*EPSILON`` on otherwise-valid inputs, and the divergence is
    non-negative by definition.
    """
    pt_c, _, log_ratio, support = _divergence_parts(p_target, p_current)
    terms = torch.where(support, pt_c * log_ratio, torch.zeros_like(pt_c))
    return terms.sum(dim=-1).clamp(min=0.0)


def tr_kld_reg(p_target, p_current) -> Tensor:
    """Truncated KL: ``sum_k p_t[k] * max(0, log(p_t[k]/p_c[k]))``.

    Every summand is non-negative, so the result dominates :func:`kld` on the
    same inputs and is 0 exactly when the clipped distributions are equal.
    """
    pt_c, _, log_ratio, support = _divergence_parts(p_target, p_current)
    terms = torch.where(support, pt_c * torch.relu(log_ratio), torch.zeros_like(pt_c))
    return terms.sum(dim=-1)


def tr_kld_reg_grad(p_target, p_current) -> Tensor:
    """Analytic gradient of :func:`tr_kld_reg` with respect to ``p_current``.

    Entry ``k`` is ``-p_t[k]/p_c[k]`` where ``log(p_t[k]/p_c[k]) > 0`` and 0
    elsewhere; the hinge contributes 0 at the kink, and ``p_target`` is held
    constant (no gradient flows into the peer).  Valid where ``p_current``
    sits inside the unclipped region.
    """
    pt_c, pc_c, log_ratio, support = _divergence_parts(p_target, p_current)
    active = support & (log_ratio > 0)
    return torch.where(active, -pt_c / pc_c, torch.zeros_like(pt_c))


def _scalar(value) -> float:
    if torch.is_tensor(value):
        return float(value.detach())
    return float(value)


def modality_loss(ce, mimicry, beta: float):
    """Per-branch loss ``ce + beta * mimicry``.

    All three inputs must be non-negative; ``ce`` and ``mimicry`` may be
    scalars or 0-d tensors (the tensor graph is preserved).
    """
    for name, value in (("ce", ce), ("mimicry", mimicry), ("beta", beta)):
        if _scalar(value) < 0:
            raise InvalidInputError(f"{name} must be non-negative, got {_scalar(value)}")
    return ce + beta * mimicry


@dataclass(frozen=True)
class LossWeights:
    """Convex weights (w1, w2, w3) over the image, text, and fusion losses."""

    w1: float = 1.0 / 3.0
    w2: float = 1.0 / 3.0
    w3: float = 1.0 / 3.0

    def __post_init__(self):
        for name, w in (("w1", self.w1), ("w2", self.w2), ("w3", self.w3)):
            if not (0.0 <= float(w) <= 1.0):
                raise InvalidConfigError(f"{name} must lie in [0, 1], got {w}")
        total = self.w1 + self.w2 + self.w3
        if abs(total - 1.0) > 1e-9:
            raise InvalidConfigError(f"loss weights must sum to 1, got {total!r}")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.w1, self.w2, self.w3)


@dataclass(frozen=True)
class LossBreakdown:
    """One training step's loss terms: per-branch, fusion, weighted total."""

    l1: float
    l2: float
    l3: float
    total: float
    d_image: float = 0.0
    d_text: float = 0.0


def total_loss(l1, l2, l3, weights, d_image=0.0, d_text=0.0) -> LossBreakdown:
    """Weighted total ``w1*l1 + w2*l2 + w3*l3`` as a :class:`LossBreakdown`.

    ``weights`` may be a :class:`LossWeights` or any 3-sequence (validated).
    ``d_image``/``d_text`` are the mimicry terms already inside l1/l2; they
    are carried through for logging only.
    """
    if not isinstance(weights, LossWeights):
        weights = LossWeights(*tuple(weights))
    values = [_scalar(v) for v in (l1, l2, l3)]
    for name, v in zip(("l1", "l2", "l3"), values):
        if v < 0:
            raise InvalidInputError(f"{name} must be non-negative, got {v}")
    w1, w2, w3 = weights.as_tuple()
    total = w1 * values[0] + w2 * values[1] + w3 * values[2]
    return LossBreakdown(
        l1=values[0],
        l2=values[1],
        l3=values[2],
        total=total,
        d_image=_scalar(d_image),
        d_text=_scalar(d_text),
    )


def weighted_total(l1: Tensor, l2: Tensor, l3: Tensor, weights: LossWeights) -> Tensor:
    """Tensor-valued counterpart of :func:`total_loss` for backprop."""
    w1, w2, w3 = weights.as_tuple()
    return w1 * l1 + w2 * l2 + w3 * l3
