"""
Logit summation and evidential fusion
=====================================

Logit summation adds per-modality class scores. The evidential rule reads
each modality's logits as a Dirichlet ``alpha = softplus(logits) + 1``,
converts it to belief masses plus an uncertainty mass, and combines them with
the reduced Dempster rule.
"""

import numpy as np

from fusionbench.logit_fusion import (
    EvidenceOpinion,
    dempster_combine,
    evidence_from_logits,
    fuse_evidential,
    logit_sum,
)

print(logit_sum([[1.0, 2.0], [0.5, -1.0]]))

# two opinions that disagree: each is half sure of a different class
a = EvidenceOpinion(np.array([3.0, 1.0]))
b = EvidenceOpinion(np.array([1.0, 3.0]))
print("belief", a.belief, "uncertainty", a.uncertainty)
ab = dempster_combine(a, b)
print("fused alpha", ab.alpha, "belief", ab.belief, "uncertainty", ab.uncertainty)

# a vacuous opinion carries no evidence and leaves the other side unchanged
print(dempster_combine(a, EvidenceOpinion.vacuous(2)).alpha)

# batched fusion: a confident modality and an uninformed one
confident = np.array([[4.0, -3.0, -3.0]])
unsure = np.array([[-30.0, -30.0, -30.0]])
alpha, probs, u = fuse_evidential([confident, unsure])
print("alpha", alpha.round(3), "probs", probs.round(3), "u", u.round(3))
print("single-modality alpha", evidence_from_logits(confident).round(3))
