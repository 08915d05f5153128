"""Projection layers, Transformer encoder blocks and classification-token handling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn

INIT_STD = 0.02


class EncoderError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 32
    n_heads: int = 4
    n_layers: int = 1
    ff_mult: int = 2
    dropout: float = 0.0
    max_seq_len: int = 512
    positional: str = "learned"

    def __post_init__(self):
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise EncoderError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.n_layers < 0:
            raise EncoderError("n_layers must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise EncoderError("dropout must lie in [0, 1)")
        if self.positional not in ("learned", "sinusoidal", "none"):
            raise EncoderError(f"unknown positional scheme {self.positional!r}")


@dataclass
class SequenceBatch:
    values: Tensor  # [batch, length, d_model]
    has_cls: bool = False

    @property
    def length(self) -> int:
        return self.values.shape[1]


def init_weights(module: nn.Module):
    """Truncated normal for projections, zeros for biases, unit LayerNorm."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv1d)):
            nn.init.trunc_normal_(m.weight, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def _check_width(x: Tensor, in_dim: int, what: str):
    if x.ndim != 3 or x.shape[-1] != in_dim:
        raise EncoderError(f"{what}: expected input [B, L, {in_dim}], got {list(x.shape)}")


class ConvProjection(nn.Module):
    """1D convolution along the sequence axis with same-padding (length preserving)."""

    def __init__(self, in_dim: int, d_model: int, kernel_size: int = 3):
        super().__init__()
        if kernel_size % 2 != 1:
            raise EncoderError("kernel_size must be odd for same-padding")
        self.in_dim = in_dim
        self.conv = nn.Conv1d(in_dim, d_model, kernel_size, padding=kernel_size // 2)

    def forward(self, x: Tensor) -> SequenceBatch:
        _check_width(x, self.in_dim, "conv_project")
        return SequenceBatch(self.conv(x.transpose(1, 2)).transpose(1, 2))


class LinearProjection(nn.Module):
    def __init__(self, in_dim: int, d_model: int):
        super().__init__()
        self.in_dim = in_dim
        self.linear = nn.Linear(in_dim, d_model)

    def forward(self, x: Tensor) -> SequenceBatch:
        _check_width(x, self.in_dim, "linear_project")
        return SequenceBatch(self.linear(x))


class ClsToken(nn.Module):
    """Learned classification token prepended at position 0."""

    def __init__(self, d_model: int):
        super().__init__()
        self.cls = nn.Parameter(torch.zeros(d_model))
        nn.init.trunc_normal_(self.cls, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD)

    def forward(self, s: SequenceBatch) -> SequenceBatch:
        if s.has_cls:
            raise EncoderError("sequence already carries a classification token")
        v = s.values
        cls = self.cls.to(v.dtype).expand(v.shape[0], 1, -1)
        return SequenceBatch(torch.cat([cls, v], dim=1), has_cls=True)


def select_cls(s: SequenceBatch) -> Tensor:
    if not s.has_cls:
        raise EncoderError("select_cls on a sequence without a classification token")
    return s.values[:, 0]


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with separate query/key/value projections."""

    def __init__(self, d_model: int, n_heads: int, out_proj: bool = True, dropout: float = 0.0):
        super().__init__()
        if d_model % n_heads:
            raise EncoderError(f"d_model={d_model} is not divisible by n_heads={n_heads}")
        self.d_model, self.n_heads = d_model, n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model) if out_proj else nn.Identity()
        self.drop = nn.Dropout(dropout)

    def _heads(self, x: Tensor) -> Tensor:
        B, L, _ = x.shape
        return x.view(B, L, self.n_heads, -1).transpose(1, 2)

    def attention_weights(self, query: Tensor, context: Tensor) -> Tensor:
        q, k = self._heads(self.q(query)), self._heads(self.k(context))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_model // self.n_heads)
        return scores.softmax(dim=-1)

    def forward(self, query: Tensor, context: Tensor) -> Tensor:
        if query.shape[-1] != self.d_model or context.shape[-1] != self.d_model:
            raise EncoderError(
                f"attention width mismatch: query {query.shape[-1]}, context {context.shape[-1]}, "
                f"expected {self.d_model}")
        w = self.drop(self.attention_weights(query, context))
        out = w @ self._heads(self.v(context))
        B, _, L, _ = out.shape
        return self.o(out.transpose(1, 2).reshape(B, L, self.d_model))


class EncoderBlock(nn.Module):
    """Pre-norm self-attention + GELU feed-forward, both residual."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        d = cfg.d_model
        self.ln1 = nn.LayerNorm(d)
        self.attn = MultiHeadAttention(d, cfg.n_heads, dropout=cfg.dropout)
        self.ln2 = nn.LayerNorm(d)
        self.ff = nn.Sequential(nn.Linear(d, cfg.ff_mult * d), nn.GELU(),
                                nn.Linear(cfg.ff_mult * d, d))
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x: Tensor) -> Tensor:
        h = self.ln1(x)
        x = x + self.drop(self.attn(h, h))
        return x + self.drop(self.ff(self.ln2(x)))


def sinusoidal_table(length: int, d_model: int) -> Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    i = torch.arange(0, d_model, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i / d_model)
    table = torch.zeros(length, d_model, dtype=torch.float64)
    table[:, 0::2] = torch.sin(angle)
    table[:, 1::2] = torch.cos(angle)[:, : d_model // 2]
    return table.float()


class TransformerEncoder(nn.Module):
    """A stack of ``n_layers`` pre-norm blocks; with zero layers it is the identity."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.blocks = nn.ModuleList(EncoderBlock(cfg) for _ in range(cfg.n_layers))
        if cfg.n_layers and cfg.positional == "learned":
            self.pos = nn.Parameter(torch.zeros(cfg.max_seq_len, cfg.d_model))
            nn.init.trunc_normal_(self.pos, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD)
        elif cfg.n_layers and cfg.positional == "sinusoidal":
            self.register_buffer("pos", sinusoidal_table(cfg.max_seq_len, cfg.d_model),
                                 persistent=False)
        else:
            self.pos = None
        self.norm = nn.LayerNorm(cfg.d_model) if cfg.n_layers else None

    def forward(self, s: SequenceBatch) -> SequenceBatch:
        if s.length > self.cfg.max_seq_len:
            raise EncoderError(f"sequence length {s.length} exceeds max_seq_len={self.cfg.max_seq_len}")
        if s.values.shape[-1] != self.cfg.d_model:
            raise EncoderError(f"encoder expects width {self.cfg.d_model}, got {s.values.shape[-1]}")
        if not self.blocks:
            return s
        x = s.values
        if self.pos is not None:
            x = x + self.pos[: s.length].to(x.dtype)
        for block in self.blocks:
            x = block(x)
        return SequenceBatch(self.norm(x), s.has_cls)


def encode(s: SequenceBatch, encoder: TransformerEncoder) -> SequenceBatch:
    return encoder(s)
