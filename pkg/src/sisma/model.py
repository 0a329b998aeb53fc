"""Full SISMA network: configuration, assembly, EMA and parameter accounting."""

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import MaskEncoder, PatchEmbed, PatchGrid, SismaBlock, TimestepEmbedder, adaln_modulate, depatchify
from .errors import MaskError, ShapeError, ValidationError
from .ssm_core import DEFAULT_MODE, MODES


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    latent_channels: int = 3
    scale_factor: int = 1
    patch_size: int = 2
    hidden: int = 128
    depth: int = 6
    state_dim: int = 16
    expansion: int = 2
    mask_classes: int = 4
    timestep_embed_dim: int = 256
    conv_width: int = 4
    scan_mode: str = DEFAULT_MODE

    def violations(self):
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "scan_mode":
                if v not in MODES:
                    out.append(f"scan_mode must be one of {MODES}, got {v!r}")
            elif not isinstance(v, int) or isinstance(v, bool) or v < 1:
                out.append(f"{f.name} must be a positive integer, got {v!r}")
        if not out:
            if self.image_size % self.scale_factor:
                out.append(f"scale_factor {self.scale_factor} does not divide image_size {self.image_size}")
            elif self.latent_size % self.patch_size:
                out.append(f"patch_size {self.patch_size} does not divide latent size {self.latent_size}")
        return out

    def validate(self):
        problems = self.violations()
        if problems:
            raise ValidationError("invalid model config", problems)
        return self

    @property
    def latent_size(self):
        return self.image_size // self.scale_factor

    @property
    def tokens(self):
        return (self.latent_size // self.patch_size) ** 2

    @property
    def mask_embed_dim(self):
        return math.ceil(self.hidden / self.patch_size ** 2)

    def fingerprint(self):
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


PRESETS = {
    # 24 blocks of width 1024, 256px images through an f=8, c=4 autoencoder, 19 face classes
    "full": ModelConfig(image_size=256, latent_channels=4, scale_factor=8, patch_size=2, hidden=1024,
                         depth=24, mask_classes=19),
    "desk": ModelConfig(),
    "tiny": ModelConfig(image_size=4, latent_channels=3, scale_factor=1, patch_size=2, hidden=8, depth=2,
                        state_dim=4, mask_classes=4, timestep_embed_dim=8),
    # smallest size the shapes generator supports; used for fast end-to-end tests
    # reduced-width desk variant for CPU-budget end-to-end runs
    "demo": ModelConfig(hidden=64, depth=4, timestep_embed_dim=128),
    "mini": ModelConfig(image_size=16, hidden=16, depth=2, state_dim=4, timestep_embed_dim=16),
}


def preset(name):
    try:
        return PRESETS[name]
    except KeyError:
        raise ValidationError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}") from None


class IdentityCodec:
    """Pixel-space stand-in for the frozen autoencoder (f = 1, latents are images)."""

    scale_factor = 1

    def encode(self, images):
        return images

    def decode(self, latents):
        return latents


class FinalLayer(nn.Module):
    def __init__(self, hidden, patch_dim):
        super().__init__()
        self.adaln = nn.Sequential(nn.SiLU(), nn.Linear(hidden, 2 * hidden))
        self.linear = nn.Linear(hidden, patch_dim)
        for lin in (self.adaln[1], self.linear):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(self, x, t_emb):
        shift, scale = self.adaln(t_emb).chunk(2, dim=-1)
        return self.linear(adaln_modulate(x, shift, scale))


class Sisma(nn.Module):
    """Mask-conditioned velocity network over patchified latents.

    latent -> patch tokens -> depth x SismaBlock(tokens, S_M, t_emb) -> final
    AdaLN + linear head -> depatchify. The mask is encoded once per call and
    shared by every block. A fresh model predicts exactly zero velocity.
    """

    def __init__(self, config, codec=None):
        super().__init__()
        config.validate()
        self.config = config
        self.codec = codec
        c = config
        self.grid = PatchGrid(c.latent_channels, c.latent_size, c.latent_size, c.patch_size)
        self.x_embed = PatchEmbed(self.grid, c.hidden)
        self.mask_encoder = MaskEncoder(c.mask_classes, c.mask_embed_dim, c.patch_size, c.hidden,
                                        c.latent_size, c.latent_size)
        self.t_embed = TimestepEmbedder(c.hidden, c.timestep_embed_dim)
        self.blocks = nn.ModuleList(
            SismaBlock(c.hidden, c.state_dim, c.expansion, c.conv_width, c.scan_mode) for _ in range(c.depth)
        )
        self.final = FinalLayer(c.hidden, self.grid.patch_dim)
        for name, module in self.named_modules():
            if hasattr(module, "d_inner"):
                module.name = name

    def prepare_mask(self, mask):
        """Accept an integer class map (B, h, w) or one-hot (B, K, h, w) at latent or image resolution."""
        c = self.config
        if not torch.is_floating_point(mask):
            if mask.numel() and (mask.min() < 0 or mask.max() >= c.mask_classes):
                raise MaskError(
                    f"mask class ids must lie in [0, {c.mask_classes}), found range "
                    f"[{int(mask.min())}, {int(mask.max())}]")
            mask = F.one_hot(mask.long(), c.mask_classes).movedim(-1, -3)
        if mask.ndim == 3:
            mask = mask.unsqueeze(0)
        mask = mask.to(self.x_embed.proj.weight.dtype)
        if mask.shape[-1] != c.latent_size:
            if mask.shape[-1] != c.image_size:
                raise ShapeError(f"mask size {tuple(mask.shape[-2:])} matches neither image nor latent grid",
                                 dim="mask")
            mask = F.interpolate(mask, size=(c.latent_size, c.latent_size), mode="nearest")
        return mask

    def encode_mask(self, mask):
        return self.mask_encoder(self.prepare_mask(mask))

    def velocity(self, z, t, s_m):
        """Velocity from latents, timesteps and precomputed mask tokens."""
        if z.ndim == 3:
            z = z.unsqueeze(0)
        t = torch.as_tensor(t, dtype=z.dtype)
        if t.ndim == 0:
            t = t.expand(z.shape[0])
        t_emb = self.t_embed(t)
        x = self.x_embed(z)
        if s_m.shape[0] != x.shape[0]:
            s_m = s_m.expand(x.shape[0], -1, -1)
        for block in self.blocks:
            x = block(x, s_m, t_emb)
        return depatchify(self.final(x, t_emb), self.grid)

    def forward(self, z, t, mask):
        return self.velocity(z, t, self.encode_mask(mask))


def build_model(config, seed=0, dtype=torch.float32, codec=None):
    config = config.validate()
    if codec is None and config.scale_factor == 1:
        codec = IdentityCodec()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = Sisma(config, codec)
    return model.to(dtype)


def forward_velocity(model, z, t, mask):
    return model(z, t, mask)


def ema_update(ema_weights, weights, decay):
    """ema <- decay * ema + (1 - decay) * w for every entry, in place.

    Both arguments are name -> tensor mappings (e.g. ``state_dict()`` or
    ``dict(named_parameters())``).
    """
    if not 0 <= decay < 1:
        raise ValidationError(f"EMA decay must lie in [0, 1), got {decay}")
    missing = sorted(set(weights) ^ set(ema_weights))
    if missing:
        raise ValidationError("EMA and model weights differ structurally", [f"entry {n!r}" for n in missing])
    with torch.no_grad():
        for name, w in weights.items():
            e = ema_weights[name]
            if e.shape != w.shape:
                raise ValidationError("EMA and model weights differ structurally",
                                      [f"entry {name!r}: {tuple(e.shape)} vs {tuple(w.shape)}"])
            e.mul_(decay).add_(w.detach(), alpha=1 - decay)
    return ema_weights


@dataclass
class ParamReport:
    total: int
    per_module: dict

    def table(self):
        width = max(len(k) for k in self.per_module) if self.per_module else 5
        rows = [f"{name:<{width}}  {n:>12,d}" for name, n in self.per_module.items()]
        rows.append(f"{'total':<{width}}  {self.total:>12,d}")
        return "\n".join(rows)


def count_params(model):
    per_module = {}
    for name, p in model.named_parameters():
        top = name.split(".")[0]
        if top == "blocks":
            top = ".".join(name.split(".")[:2])
        per_module[top] = per_module.get(top, 0) + p.numel()
    return ParamReport(sum(per_module.values()), per_module)


@torch.no_grad()
def sample(model, masks, seeds, steps=200, batch_size=64):
    """Euler-sample one image per (mask, seed) pair and decode through the codec.

    ``masks`` is (n, h, w) integer ids or (n, K, h, w) one-hot; ``seeds`` holds
    n ints, each fixing the initial noise of its row independently of batching.
    """
    from .flow_match import euler_sample

    seeds = [int(s) for s in seeds]
    if len(seeds) != len(masks):
        raise ShapeError(f"{len(seeds)} seeds for {len(masks)} masks", dim="batch")
    c = model.config
    dtype = model.x_embed.proj.weight.dtype
    out = []
    for i in range(0, len(seeds), batch_size):
        s_m = model.encode_mask(torch.as_tensor(np.asarray(masks[i:i + batch_size])))
        shape = (s_m.shape[0], c.latent_channels, c.latent_size, c.latent_size)
        z = euler_sample(model.velocity, s_m, shape, steps=steps, seed=seeds[i:i + batch_size], dtype=dtype)
        out.append(model.codec.decode(z) if model.codec is not None else z)
    return torch.cat(out)
