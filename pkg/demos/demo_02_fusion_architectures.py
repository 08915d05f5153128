"""
Feature-level fusion architectures
==================================

Every fuser maps a list of ``[batch, length, features]`` tensors to one
representation, and a linear head turns that into class scores. CAF and
CACF are defined for exactly two modalities.
"""

import torch

from fusionbench.fusion import ARCHITECTURES, ArityError, FusionConfig, FusionModel

torch.manual_seed(0)
shapes = [(8, 8), (6, 5)]
xs = [torch.randn(4, L, D) for L, D in shapes]

for arch in ARCHITECTURES:
    model = FusionModel(FusionConfig.small(arch, n_classes=4, d_model=16, n_heads=2), shapes, seed=0)
    n_params = sum(p.numel() for p in model.parameters())
    print(f"{arch:13s} g {tuple(model.represent(xs).shape)}  logits {tuple(model(xs).shape)}  "
          f"{n_params} parameters")

# CACF encodes one joint sequence [CLS; x'1; z12; x'2; z21]
cacf = FusionModel(FusionConfig.small("cacf", 4, d_model=16, n_heads=2), shapes, seed=0)
print("cacf joint length:", cacf.fuser.joint_sequence(xs).values.shape[1])  # 1 + 2*9 + 2*7

# cross-attention fusers refuse a third modality up front
try:
    FusionModel(FusionConfig.small("caf", 4, d_model=16, n_heads=2), shapes + [(3, 3)])
except ArityError as exc:
    print("arity error:", exc)

# with identity encoders the multi-to-one output is just the fusion CLS vector
m = FusionModel(FusionConfig.small("multi_to_one", 4, d_model=16, n_heads=2,
                                   modality_layers=0, fusion_layers=0), shapes, seed=0)
print(torch.equal(m.represent(xs)[0], m.fuser.cls.cls))
