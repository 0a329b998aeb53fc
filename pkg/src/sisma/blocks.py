"""Token-space plumbing around the SSM layers and the SISMA block itself."""

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import MaskError, PreconditionError, ShapeError
from .ssm_core import DEFAULT_MODE, CrossMamba, SelfMamba

LN_EPS = 1e-6


@dataclass(frozen=True)
class PatchGrid:
    channels: int
    height: int
    width: int
    patch_size: int

    def __post_init__(self):
        p = self.patch_size
        if min(self.channels, self.height, self.width, p) < 1:
            raise ShapeError(f"grid dimensions must be positive: {self}", dim="grid")
        if self.height % p or self.width % p:
            raise ShapeError(
                f"patch size {p} does not divide the {self.height}x{self.width} latent", dim="patch_size"
            )

    @property
    def rows(self):
        return self.height // self.patch_size

    @property
    def cols(self):
        return self.width // self.patch_size

    @property
    def token_count(self):
        return self.rows * self.cols

    @property
    def patch_dim(self):
        return self.channels * self.patch_size ** 2


def patchify(latent, grid):
    """(..., c, h, w) -> (..., L, c*p*p), raster order over patches.

    Each token is its patch flattened channel-first, then row, then column.
    """
    if tuple(latent.shape[-3:]) != (grid.channels, grid.height, grid.width):
        raise ShapeError(
            f"latent {tuple(latent.shape[-3:])} does not match grid "
            f"({grid.channels}, {grid.height}, {grid.width})", dim="latent")
    p = grid.patch_size
    lead = latent.shape[:-3]
    x = latent.reshape(*lead, grid.channels, grid.rows, p, grid.cols, p)
    n = len(lead)
    # (..., c, R, p, C, p) -> (..., R, C, c, p, p)
    x = x.permute(*range(n), n + 1, n + 3, n, n + 2, n + 4)
    return x.reshape(*lead, grid.token_count, grid.patch_dim)


def depatchify(tokens, grid):
    """Exact inverse of :func:`patchify`'s flattening."""
    if tokens.shape[-2] != grid.token_count:
        raise ShapeError(f"got {tokens.shape[-2]} tokens, grid holds {grid.token_count}", dim="L")
    if tokens.shape[-1] != grid.patch_dim:
        raise ShapeError(f"token width {tokens.shape[-1]} != c*p*p = {grid.patch_dim}", dim="D")
    p = grid.patch_size
    lead = tokens.shape[:-2]
    n = len(lead)
    x = tokens.reshape(*lead, grid.rows, grid.cols, grid.channels, p, p)
    x = x.permute(*range(n), n + 2, n, n + 3, n + 1, n + 4)
    return x.reshape(*lead, grid.channels, grid.height, grid.width)


class PatchEmbed(nn.Module):
    """Patchify followed by a linear map c*p*p -> hidden."""

    def __init__(self, grid, hidden):
        super().__init__()
        self.grid = grid
        self.proj = nn.Linear(grid.patch_dim, hidden)
        nn.init.normal_(self.proj.weight, std=grid.patch_dim ** -0.5)
        nn.init.zeros_(self.proj.bias)

    def forward(self, latent):
        return self.proj(patchify(latent, self.grid))


def check_one_hot(mask_onehot):
    """Raise MaskError unless every pixel carries exactly one 1 over the class axis."""
    m = mask_onehot
    ok_values = ((m == 0) | (m == 1)).all(dim=-3)
    ok_sum = m.sum(dim=-3) == 1
    bad = ~(ok_values & ok_sum)
    if bad.any():
        idx = [tuple(int(i) for i in row) for row in bad.nonzero()[:5]]
        raise MaskError(f"{int(bad.sum())} pixel(s) are not one-hot, e.g. at {idx}")


class MaskEncoder(nn.Module):
    """One-hot class map -> token-aligned mask embedding S_M.

    A 1x1 convolution over a one-hot input is a per-pixel table lookup, so the
    layer is stored as a (K, D_m) class table; the embedded map is then
    patchified with its own projection D_m*p*p -> hidden.
    """

    def __init__(self, num_classes, embed_dim, patch_size, hidden, height, width):
        super().__init__()
        self.num_classes = num_classes
        self.class_table = nn.Parameter(torch.randn(num_classes, embed_dim) * num_classes ** -0.5)
        self.grid = PatchGrid(embed_dim, height, width, patch_size)
        self.proj = nn.Linear(self.grid.patch_dim, hidden)
        nn.init.normal_(self.proj.weight, std=self.grid.patch_dim ** -0.5)
        nn.init.zeros_(self.proj.bias)

    def embed_pixels(self, mask_onehot):
        if mask_onehot.shape[-3] != self.num_classes:
            raise MaskError(f"mask has {mask_onehot.shape[-3]} class channels, encoder expects {self.num_classes}")
        check_one_hot(mask_onehot)
        return torch.einsum("...khw,kd->...dhw", mask_onehot.to(self.class_table.dtype), self.class_table)

    def forward(self, mask_onehot):
        return self.proj(patchify(self.embed_pixels(mask_onehot), self.grid))


def sinusoidal_embedding(t, dim, max_period=10000.0, time_scale=1000.0):
    """Half cos, half sin features of ``time_scale * t``.

    Periods are log-spaced over [1, max_period] ticks of the scaled clock, so
    t in [0, 1] spans 1000 ticks. At t = 0 the sin half is 0 and the cos half 1.
    """
    t = torch.as_tensor(t)
    if t.ndim == 0:
        t = t[None]
    if torch.any((t < 0) | (t > 1)):
        raise PreconditionError("timestep must lie in [0, 1]")
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = time_scale * t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class TimestepEmbedder(nn.Module):
    def __init__(self, hidden, freq_dim=256):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, hidden), nn.SiLU(), nn.Linear(hidden, hidden))
        for lin in (self.mlp[0], self.mlp[2]):
            nn.init.normal_(lin.weight, std=lin.in_features ** -0.5)
            nn.init.zeros_(lin.bias)

    def forward(self, t):
        emb = sinusoidal_embedding(t, self.freq_dim).to(self.mlp[0].weight.dtype)
        return self.mlp(emb)


def layer_norm(x):
    return F.layer_norm(x, x.shape[-1:], eps=LN_EPS)


def adaln_modulate(x, shift, scale):
    """layernorm(x) * (1 + scale) + shift with (B, D) modulation broadcast over tokens."""
    if shift.shape[-1] != x.shape[-1] or scale.shape[-1] != x.shape[-1]:
        raise ShapeError("shift/scale width must match the token width", dim="D")
    return layer_norm(x) * (1 + scale.unsqueeze(-2)) + shift.unsqueeze(-2)


class FeedForward(nn.Module):
    def __init__(self, hidden, mult=4):
        super().__init__()
        self.fc1 = nn.Linear(hidden, mult * hidden)
        self.fc2 = nn.Linear(mult * hidden, hidden)
        for lin in (self.fc1, self.fc2):
            nn.init.normal_(lin.weight, std=lin.in_features ** -0.5)
            nn.init.zeros_(lin.bias)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class SismaBlock(nn.Module):
    """Self-Mamba, Cross-Mamba and feed-forward, each a gated pre-norm residual.

    The AdaLN head maps the timestep embedding to nine vectors (shift, scale
    and gate for each sub-layer). It is zero-initialised, which makes a fresh
    block the identity map.
    """

    def __init__(self, hidden, d_state=16, expand=2, d_conv=4, mode=DEFAULT_MODE):
        super().__init__()
        self.self_mamba = SelfMamba(hidden, d_state, expand, d_conv, mode)
        self.cross_mamba = CrossMamba(hidden, None, d_state, expand, d_conv, mode)
        self.ffn = FeedForward(hidden)
        self.adaln = nn.Sequential(nn.SiLU(), nn.Linear(hidden, 9 * hidden))
        nn.init.zeros_(self.adaln[1].weight)
        nn.init.zeros_(self.adaln[1].bias)

    def forward(self, x, s_m, t_emb):
        shift1, scale1, gate1, shift2, scale2, gate2, shift3, scale3, gate3 = self.adaln(t_emb).chunk(9, dim=-1)
        x = x + gate1.unsqueeze(-2) * self.self_mamba(adaln_modulate(x, shift1, scale1))
        x = x + gate2.unsqueeze(-2) * self.cross_mamba(adaln_modulate(x, shift2, scale2), s_m)
        x = x + gate3.unsqueeze(-2) * self.ffn(adaln_modulate(x, shift3, scale3))
        return x
