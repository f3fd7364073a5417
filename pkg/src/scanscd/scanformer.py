"""Cross-shaped window attention head over the concatenated TED features.

Token layout: three ``C x h x w`` grids are concatenated along channels
(order x1 | x2 | xc) and flattened row-major, token ``r * w + c`` holding
grid cell ``(r, c)``.  Tensors are ``(B, h*w, d)`` with ``d = 3C``.

Half of the ``2K`` heads attend within horizontal stripes (``s`` full rows),
the other half within vertical stripes (``s`` full columns).
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import TedOutputs
from .config import ModelConfig
from .errors import ConfigError

HORIZONTAL = "horizontal"
VERTICAL = "vertical"


def tokenize(x1, x2, xc):
    if not (x1.shape == x2.shape == xc.shape):
        raise ConfigError(f"cannot tokenize grids of shapes {tuple(x1.shape)}, "
                          f"{tuple(x2.shape)}, {tuple(xc.shape)}")
    x = torch.cat([x1, x2, xc], dim=1)
    return x.flatten(2).transpose(1, 2)


def detokenize(tokens, h: int, w: int, parts: int = 3):
    b, n, d = tokens.shape
    if n != h * w or d % parts:
        raise ConfigError(f"token matrix {n}x{d} does not match a {parts}-part {h}x{w} grid")
    grid = tokens.transpose(1, 2).reshape(b, d, h, w)
    return tuple(grid.chunk(parts, dim=1))


def stripe_shape(h: int, w: int, orientation: str, s: int) -> tuple[int, int]:
    """Rows and columns of one stripe."""
    if orientation == HORIZONTAL:
        if h % s:
            raise ConfigError(f"grid height {h} is not divisible by stripe width {s}")
        return s, w
    if orientation == VERTICAL:
        if w % s:
            raise ConfigError(f"grid width {w} is not divisible by stripe width {s}")
        return h, s
    raise ValueError(f"unknown orientation {orientation!r}")


def stripe_partition(x, h: int, w: int, orientation: str, s: int):
    """``(B, h*w, C) -> (B, M, n, C)`` with tokens row-major inside each stripe."""
    stripe_shape(h, w, orientation, s)
    b, _, c = x.shape
    grid = x.reshape(b, h, w, c)
    if orientation == HORIZONTAL:
        return grid.reshape(b, h // s, s * w, c)
    grid = grid.reshape(b, h, w // s, s, c).permute(0, 2, 1, 3, 4)
    return grid.reshape(b, w // s, h * s, c)


def stripe_merge(stripes, h: int, w: int, orientation: str, s: int):
    """Inverse of :func:`stripe_partition`."""
    stripe_shape(h, w, orientation, s)
    b, _, _, c = stripes.shape
    if orientation == HORIZONTAL:
        return stripes.reshape(b, h * w, c)
    grid = stripes.reshape(b, w // s, h, s, c).permute(0, 2, 1, 3, 4)
    return grid.reshape(b, h * w, c)


def relative_position_index(rows: int, cols: int) -> torch.Tensor:
    """``(n, n)`` lookup into a ``(2*rows-1)*(2*cols-1)`` bias table."""
    r, c = torch.meshgrid(torch.arange(rows), torch.arange(cols), indexing="ij")
    r, c = r.flatten(), c.flatten()
    dr = r[:, None] - r[None, :] + rows - 1
    dc = c[:, None] - c[None, :] + cols - 1
    return dr * (2 * cols - 1) + dc


def stripe_attention(q, k, v, bias=None, bias_inside_softmax: bool = False):
    """Attention within stripes: ``[softmax(q k^T / sqrt(d_k)) + B] v``.

    ``q, k, v`` are ``(..., n, d_k)``; ``bias`` broadcasts to ``(..., n, n)``.
    With ``bias_inside_softmax`` the bias is added to the logits instead.
    """
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if bias is not None and bias_inside_softmax:
        scores = scores + bias
    weights = scores.softmax(dim=-1)
    if bias is not None and not bias_inside_softmax:
        weights = weights + bias
    return weights @ v


class CSWinAttention(nn.Module):
    def __init__(self, dim: int, grid: tuple[int, int], stripe_width: int,
                 heads_per_group: int, bias_inside_softmax: bool = False):
        super().__init__()
        if dim % (2 * heads_per_group):
            raise ConfigError(f"dim {dim} is not divisible by {2 * heads_per_group} heads")
        self.dim = dim
        self.h, self.w = grid
        self.s = stripe_width
        self.k = heads_per_group
        self.head_dim = dim // (2 * heads_per_group)
        self.bias_inside_softmax = bias_inside_softmax
        self.qkv = nn.Linear(dim, 3 * dim, bias=False)
        self.proj = nn.Linear(dim, dim)

        self.shapes = {o: stripe_shape(self.h, self.w, o, self.s) for o in (HORIZONTAL, VERTICAL)}
        for o, (rows, cols) in self.shapes.items():
            table = nn.Parameter(torch.zeros(heads_per_group, (2 * rows - 1) * (2 * cols - 1)))
            self.register_parameter(f"bias_{o}", table)
            self.register_buffer(f"index_{o}", relative_position_index(rows, cols), persistent=False)

    def position_bias(self, orientation: str):
        table = getattr(self, f"bias_{orientation}")
        index = getattr(self, f"index_{orientation}")
        return table[:, index]

    def _group(self, q, k, v, orientation: str):
        # q, k, v: (B, hw, K, d_k)
        b = q.shape[0]
        parts = []
        for t in (q, k, v):
            t = stripe_partition(t.flatten(2), self.h, self.w, orientation, self.s)
            m, n = t.shape[1], t.shape[2]
            parts.append(t.reshape(b, m, n, self.k, self.head_dim).transpose(2, 3))
        bias = self.position_bias(orientation)[None, None]
        out = stripe_attention(*parts, bias=bias, bias_inside_softmax=self.bias_inside_softmax)
        out = out.transpose(2, 3).flatten(3)  # (B, M, n, K*d_k)
        return stripe_merge(out, self.h, self.w, orientation, self.s)

    def forward(self, x):
        b, n, d = x.shape
        if n != self.h * self.w or d != self.dim:
            raise ConfigError(f"expected tokens ({self.h * self.w}, {self.dim}), got ({n}, {d})")
        qkv = self.qkv(x).reshape(b, n, 3, 2 * self.k, self.head_dim)
        q, k, v = qkv.unbind(dim=2)
        kk = self.k
        horiz = self._group(q[:, :, :kk], k[:, :, :kk], v[:, :, :kk], HORIZONTAL)
        vert = self._group(q[:, :, kk:], k[:, :, kk:], v[:, :, kk:], VERTICAL)
        return self.proj(torch.cat([horiz, vert], dim=-1))


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class AttentionBlock(nn.Module):
    """Pre-norm residual block: ``x + SA(LN(x))`` then ``x + MLP(LN(x))``."""

    def __init__(self, dim: int, grid: tuple[int, int], stripe_width: int,
                 heads_per_group: int, mlp_ratio: int = 2, bias_inside_softmax: bool = False):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = CSWinAttention(dim, grid, stripe_width, heads_per_group, bias_inside_softmax)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio * dim)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))

    def zero_residual(self):
        """Zero both residual-branch output projections, making the block the identity."""
        for lin in (self.attn.proj, self.mlp.fc2):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)


class SCanFormer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.grid = (cfg.height // 4, cfg.width // 4)
        self.blocks = nn.ModuleList(
            AttentionBlock(cfg.token_depth, self.grid, cfg.stripe_width, cfg.heads_per_group,
                           cfg.mlp_ratio, cfg.bias_inside_softmax)
            for _ in range(cfg.attention_layers)
        )

    def forward(self, ted: TedOutputs) -> TedOutputs:
        h, w = ted.x1.shape[-2:]
        x = tokenize(*ted)
        for block in self.blocks:
            x = block(x)
        return TedOutputs(*detokenize(x, h, w))

    def zero_residual(self):
        for block in self.blocks:
            block.zero_residual()


def init_transformer_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, CSWinAttention):
            for o in (HORIZONTAL, VERTICAL):
                nn.init.trunc_normal_(getattr(m, f"bias_{o}"), std=0.02)
