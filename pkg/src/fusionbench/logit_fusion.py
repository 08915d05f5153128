"""Decision-level fusion: logit summation and evidential (Dirichlet) fusion.

Evidential fusion turns each modality's logits into Dirichlet parameters
``alpha = softplus(logits) + 1``, reads them as subjective-logic opinions
(belief masses ``b`` plus uncertainty ``u``), and folds the opinions with the
reduced Dempster rule over singleton classes and the whole frame.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import reduce

import numpy as np

CONFLICT_EPS = 1e-12


class TotalConflictError(ArithmeticError):
    pass


def _stack(ls) -> np.ndarray:
    arrays = [np.asarray(l, dtype=np.float64) for l in ls]
    if not arrays:
        raise ValueError("need at least one modality")
    shape = arrays[0].shape
    for i, a in enumerate(arrays):
        if a.shape != shape:
            raise ValueError(f"modality {i} logits have shape {a.shape}, expected {shape}")
    return np.stack(arrays)


def logit_sum(ls) -> np.ndarray:
    return _stack(ls).sum(axis=0)


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def evidence_from_logits(logits) -> np.ndarray:
    return softplus(logits) + 1.0


@dataclass(frozen=True)
class EvidenceOpinion:
    """Dirichlet parameters with their belief/uncertainty reading.

    Works on a single vector ``[K]`` or a batch ``[..., K]``.
    """

    alpha: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=np.float64)
        if np.any(a < 1.0):
            raise ValueError("Dirichlet parameters must be >= 1")
        object.__setattr__(self, "alpha", a)

    @property
    def K(self) -> int:
        return self.alpha.shape[-1]

    @property
    def strength(self) -> np.ndarray:
        return self.alpha.sum(-1)

    @property
    def belief(self) -> np.ndarray:
        return opinion_from_alpha(self.alpha)[0]

    @property
    def uncertainty(self) -> np.ndarray:
        return opinion_from_alpha(self.alpha)[1]

    @property
    def probs(self) -> np.ndarray:
        return self.alpha / self.strength[..., None]

    @classmethod
    def from_opinion(cls, b, u) -> "EvidenceOpinion":
        return cls(alpha_from_opinion(b, u))

    @classmethod
    def vacuous(cls, K: int) -> "EvidenceOpinion":
        return cls(np.ones(K))


def opinion_from_alpha(alpha, K: int | None = None):
    alpha = np.asarray(alpha, dtype=np.float64)
    K = alpha.shape[-1] if K is None else K
    S = alpha.sum(-1, keepdims=True)
    return (alpha - 1.0) / S, K / S[..., 0]


def alpha_from_opinion(b, u, K: int | None = None) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    K = b.shape[-1] if K is None else K
    S = K / np.asarray(u, dtype=np.float64)
    return b * S[..., None] + 1.0


def combine_opinions(b1, u1, b2, u2):
    """Reduced Dempster rule on (belief, uncertainty) pairs; batched over leading axes."""
    u1, u2 = np.asarray(u1)[..., None], np.asarray(u2)[..., None]
    # conflict = sum over i != j of b1_i * b2_j
    conflict = b1.sum(-1, keepdims=True) * b2.sum(-1, keepdims=True) - (b1 * b2).sum(-1, keepdims=True)
    if np.any(conflict >= 1.0 - CONFLICT_EPS):
        raise TotalConflictError("opinions are in total conflict")
    norm = 1.0 - conflict
    b = (b1 * b2 + b1 * u2 + b2 * u1) / norm
    u = (u1 * u2) / norm
    return b, u[..., 0]


def dempster_combine(o1: EvidenceOpinion, o2: EvidenceOpinion) -> EvidenceOpinion:
    if o1.K != o2.K:
        raise ValueError(f"class counts differ: {o1.K} vs {o2.K}")
    b1, u1 = opinion_from_alpha(o1.alpha)
    b2, u2 = opinion_from_alpha(o2.alpha)
    b, u = combine_opinions(b1, u1, b2, u2)
    return EvidenceOpinion.from_opinion(b, u)


def fuse_evidential(ls):
    """Fold modality opinions left to right.

    Returns ``(alpha_fused [B, K], probs [B, K], u [B])``.
    """
    stacked = _stack(ls)
    opinions = [EvidenceOpinion(evidence_from_logits(l)) for l in stacked]
    fused = reduce(dempster_combine, opinions)
    return fused.alpha, fused.probs, fused.uncertainty
