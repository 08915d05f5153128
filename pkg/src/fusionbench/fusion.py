"""Feature-level fusion architectures and the model wrapper around them.

Every fuser maps a list of modality tensors ``[B, L_i, D_i]`` to one
representation ``g``; ``FusionModel`` adds the classification head, and for
the logit-level strategies (``logit_sum``, ``tmc``) one head per modality.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from . import logit_fusion
from .encoders import (
    ClsToken,
    ConvProjection,
    EncoderConfig,
    EncoderError,
    LinearProjection,
    MultiHeadAttention,
    SequenceBatch,
    TransformerEncoder,
    init_weights,
    select_cls,
)

FEATURE_ARCHITECTURES = ("multi_to_one", "one_to_multi", "caf", "cacf", "concat")
LOGIT_ARCHITECTURES = ("logit_sum", "tmc")
ARCHITECTURES = FEATURE_ARCHITECTURES + LOGIT_ARCHITECTURES
BIMODAL = ("caf", "cacf")


class ArityError(ValueError):
    """Architecture does not support the number of modalities given."""


@dataclass(frozen=True)
class FusionConfig:
    architecture: str = "concat"
    n_classes: int = 2
    modality_encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(n_layers=1))
    fusion_encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(n_layers=2))
    kernel_size: int = 3

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}; "
                             f"choose from {', '.join(ARCHITECTURES)}")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.modality_encoder.d_model != self.fusion_encoder.d_model:
            raise ValueError("modality and fusion encoders must share d_model")

    @property
    def d_model(self) -> int:
        return self.modality_encoder.d_model

    @classmethod
    def small(cls, architecture: str, n_classes: int, d_model: int = 32, n_heads: int = 4,
              modality_layers: int = 1, fusion_layers: int = 2, kernel_size: int = 3,
              **enc) -> "FusionConfig":
        base = EncoderConfig(d_model=d_model, n_heads=n_heads, **enc)
        return cls(architecture, n_classes, replace(base, n_layers=modality_layers),
                   replace(base, n_layers=fusion_layers), kernel_size)


def check_arity(architecture: str, k: int):
    if k < 1:
        raise ArityError("at least one modality is required")
    if architecture in BIMODAL and k != 2:
        raise ArityError(f"{architecture} supports exactly 2 modalities, got {k}")


def cross_attend(query: SequenceBatch, context: SequenceBatch,
                 query_side: MultiHeadAttention, context_side: MultiHeadAttention) -> SequenceBatch:
    """Queries from ``query_side`` projections, keys/values from ``context_side``.

    The output keeps the query's length (and its CLS flag).
    """
    d = query_side.d_model
    qv, cv = query.values, context.values
    if qv.shape[-1] != d or cv.shape[-1] != d:
        raise EncoderError(f"cross_attend width mismatch: query {qv.shape[-1]}, "
                           f"context {cv.shape[-1]}, expected {d}")
    h = query_side.n_heads
    B, Lq, _ = qv.shape
    Lc = cv.shape[1]
    q = query_side.q(qv).view(B, Lq, h, -1).transpose(1, 2)
    k = context_side.k(cv).view(B, Lc, h, -1).transpose(1, 2)
    v = context_side.v(cv).view(B, Lc, h, -1).transpose(1, 2)
    w = (q @ k.transpose(-2, -1) / math.sqrt(d // h)).softmax(-1)
    out = (w @ v).transpose(1, 2).reshape(B, Lq, d)
    return SequenceBatch(query_side.o(out), query.has_cls)


class ModalityBranch(nn.Module):
    """conv_project -> prepend CLS -> modality encoder -> T(.)"""

    def __init__(self, in_dim: int, cfg: EncoderConfig, kernel_size: int):
        super().__init__()
        self.proj = ConvProjection(in_dim, cfg.d_model, kernel_size)
        self.cls = ClsToken(cfg.d_model)
        self.encoder = TransformerEncoder(cfg)

    def forward(self, x: Tensor) -> Tensor:
        return select_cls(self.encoder(self.cls(self.proj(x))))


class MultiToOne(nn.Module):
    """z_i = T(E_i(conv(x_i))), g = T(E_fuse([CLS; z_1; ...; z_k]))."""

    def __init__(self, dims, cfg: FusionConfig):
        super().__init__()
        self.branches = nn.ModuleList(ModalityBranch(D, cfg.modality_encoder, cfg.kernel_size)
                                      for D in dims)
        self.cls = ClsToken(cfg.d_model)
        self.fuse = TransformerEncoder(cfg.fusion_encoder)
        self.out_dim = cfg.d_model

    def forward(self, xs) -> Tensor:
        z = torch.stack([b(x) for b, x in zip(self.branches, xs)], dim=1)
        return select_cls(self.fuse(self.cls(SequenceBatch(z))))


class OneToMulti(nn.Module):
    """Shared encoder over the joint sequence, then one encoder per segment."""

    def __init__(self, dims, cfg: FusionConfig):
        super().__init__()
        self.proj = nn.ModuleList(LinearProjection(D, cfg.d_model) for D in dims)
        self.shared = TransformerEncoder(cfg.fusion_encoder)
        self.cls = nn.ModuleList(ClsToken(cfg.d_model) for _ in dims)
        self.encoders = nn.ModuleList(TransformerEncoder(cfg.modality_encoder) for _ in dims)
        self.out_dim = len(dims) * cfg.d_model

    def segments(self, xs) -> list[Tensor]:
        parts = [p(x).values for p, x in zip(self.proj, xs)]
        h = self.shared(SequenceBatch(torch.cat(parts, dim=1))).values
        return list(torch.split(h, [p.shape[1] for p in parts], dim=1))

    def forward(self, xs) -> Tensor:
        g = [select_cls(enc(cls(SequenceBatch(h))))
             for h, cls, enc in zip(self.segments(xs), self.cls, self.encoders)]
        return torch.cat(g, dim=-1)


class CrossModality(nn.Module):
    """Per-modality content projection, CLS token and attention projections."""

    def __init__(self, in_dim: int, cfg: EncoderConfig):
        super().__init__()
        self.proj = LinearProjection(in_dim, cfg.d_model)
        self.cls = ClsToken(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads)

    def forward(self, x: Tensor) -> SequenceBatch:
        return self.cls(self.proj(x))


class CAF(nn.Module):
    """g = [T(z_{1<-2}); T(z_{2<-1})]."""

    def __init__(self, dims, cfg: FusionConfig):
        super().__init__()
        check_arity("caf", len(dims))
        self.mods = nn.ModuleList(CrossModality(D, cfg.modality_encoder) for D in dims)
        self.out_dim = 2 * cfg.d_model

    def cross(self, xs):
        check_arity("caf", len(xs))
        m1, m2 = self.mods
        s1, s2 = m1(xs[0]), m2(xs[1])
        return s1, cross_attend(s1, s2, m1.attn, m2.attn), s2, cross_attend(s2, s1, m2.attn, m1.attn)

    def forward(self, xs) -> Tensor:
        _, z12, _, z21 = self.cross(xs)
        return torch.cat([select_cls(z12), select_cls(z21)], dim=-1)


class CACF(CAF):
    """f = [CLS; x'_1; z_{1<-2}; x'_2; z_{2<-1}], g = T(E_global(f))."""

    def __init__(self, dims, cfg: FusionConfig):
        super().__init__(dims, cfg)
        self.cls = ClsToken(cfg.d_model)
        self.glob = TransformerEncoder(cfg.fusion_encoder)
        self.out_dim = cfg.d_model

    def joint_sequence(self, xs) -> SequenceBatch:
        x1, z12, x2, z21 = self.cross(xs)
        f = torch.cat([x1.values, z12.values, x2.values, z21.values], dim=1)
        return self.cls(SequenceBatch(f))

    def forward(self, xs) -> Tensor:
        return select_cls(self.glob(self.joint_sequence(xs)))


class Concat(nn.Module):
    """conv_project each modality, mean-pool over the sequence, concatenate."""

    def __init__(self, dims, cfg: FusionConfig):
        super().__init__()
        self.proj = nn.ModuleList(ConvProjection(D, cfg.d_model, cfg.kernel_size) for D in dims)
        self.out_dim = len(dims) * cfg.d_model

    def forward(self, xs) -> Tensor:
        return torch.cat([p(x).values.mean(dim=1) for p, x in zip(self.proj, xs)], dim=-1)


FUSERS = {"multi_to_one": MultiToOne, "one_to_multi": OneToMulti,
          "caf": CAF, "cacf": CACF, "concat": Concat}


class FusionModel(nn.Module):
    """Encoders + fusion strategy + classification head(s)."""

    def __init__(self, cfg: FusionConfig, shapes, seed: int | None = None):
        super().__init__()
        self.cfg = cfg
        self.shapes = [tuple(s) for s in shapes]
        check_arity(cfg.architecture, len(self.shapes))
        dims = [D for _, D in self.shapes]
        if cfg.architecture in LOGIT_ARCHITECTURES:
            self.branches = nn.ModuleList(ModalityBranch(D, cfg.modality_encoder, cfg.kernel_size)
                                          for D in dims)
            self.heads = nn.ModuleList(nn.Linear(cfg.d_model, cfg.n_classes) for _ in dims)
        else:
            self.fuser = FUSERS[cfg.architecture](dims, cfg)
            self.head = nn.Linear(self.fuser.out_dim, cfg.n_classes)
        self.reset_parameters(seed)

    @property
    def architecture(self) -> str:
        return self.cfg.architecture

    @property
    def is_logit_level(self) -> bool:
        return self.cfg.architecture in LOGIT_ARCHITECTURES

    def reset_parameters(self, seed: int | None = None):
        if seed is None:
            init_weights(self)
            return
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            init_weights(self)
            for m in self.modules():
                if isinstance(m, ClsToken):
                    nn.init.trunc_normal_(m.cls, std=0.02, a=-0.04, b=0.04)
                elif isinstance(m, TransformerEncoder) and isinstance(m.pos, nn.Parameter):
                    nn.init.trunc_normal_(m.pos, std=0.02, a=-0.04, b=0.04)

    def head_parameters(self):
        heads = self.heads if self.is_logit_level else self.head
        return list(heads.parameters())

    def encoder_parameters(self):
        head_ids = {id(p) for p in self.head_parameters()}
        return [p for p in self.parameters() if id(p) not in head_ids]

    def _check_inputs(self, xs):
        if len(xs) != len(self.shapes):
            raise ArityError(f"model expects {len(self.shapes)} modalities, got {len(xs)}")
        for i, (x, (_, D)) in enumerate(zip(xs, self.shapes)):
            if x.ndim != 3 or x.shape[-1] != D:
                raise EncoderError(f"modality {i}: expected [B, L, {D}], got {list(x.shape)}")

    def represent(self, xs) -> Tensor:
        self._check_inputs(xs)
        if self.is_logit_level:
            return torch.cat([b(x) for b, x in zip(self.branches, xs)], dim=-1)
        return self.fuser(xs)

    def classify(self, g: Tensor) -> Tensor:
        return self.head(g)

    def modality_logits(self, xs) -> list[Tensor]:
        self._check_inputs(xs)
        return [h(b(x)) for b, h, x in zip(self.branches, self.heads, xs)]

    def forward(self, xs) -> Tensor:
        """Fused class scores; log-probabilities for ``tmc`` (non-differentiable)."""
        if not self.is_logit_level:
            return self.classify(self.represent(xs))
        ls = self.modality_logits(xs)
        if self.architecture == "logit_sum":
            return torch.stack(ls).sum(0)
        probs = self._tmc_probs(ls)
        return torch.log(torch.as_tensor(probs, dtype=ls[0].dtype))

    def _tmc_probs(self, ls) -> np.ndarray:
        arrays = [l.detach().double().cpu().numpy() for l in ls]
        _, probs, _ = logit_fusion.fuse_evidential(arrays)
        return probs

    def loss(self, xs, y: Tensor) -> Tensor:
        if self.architecture == "tmc":
            # per-modality classifiers trained conventionally, fused post hoc
            return sum(F.cross_entropy(l, y) for l in self.modality_logits(xs))
        return F.cross_entropy(self(xs), y)

    @torch.no_grad()
    def predict_proba(self, xs) -> np.ndarray:
        if self.architecture == "tmc":
            return self._tmc_probs(self.modality_logits(xs))
        return self(xs).double().softmax(-1).cpu().numpy()
