"""Linear-path flow matching: interpolant, velocity target, loss, Euler sampler.

Convention: t = 0 is noise, t = 1 is data.
"""

from typing import NamedTuple

import torch

from .errors import NumericError, PreconditionError, ShapeError


class FlowBatch(NamedTuple):
    x: torch.Tensor
    eps: torch.Tensor
    t: torch.Tensor
    z: torch.Tensor
    v_target: torch.Tensor


def _per_sample(t, like):
    t = torch.as_tensor(t, dtype=like.dtype)
    if torch.any((t < 0) | (t > 1)):
        raise PreconditionError("t must lie in [0, 1]")
    if t.ndim == 1 and like.ndim > 1:
        t = t.reshape(-1, *([1] * (like.ndim - 1)))
    return t


def interpolate(x, eps, t):
    """z = t * x + (1 - t) * eps, with per-sample t broadcast over trailing dims."""
    x = torch.as_tensor(x)
    eps = torch.as_tensor(eps, dtype=x.dtype)
    if x.shape != eps.shape:
        raise ShapeError(f"x {tuple(x.shape)} and eps {tuple(eps.shape)} differ", dim="x")
    t = _per_sample(t, x)
    return t * x + (1 - t) * eps


def velocity_target(x, eps):
    x = torch.as_tensor(x)
    eps = torch.as_tensor(eps, dtype=x.dtype)
    if x.shape != eps.shape:
        raise ShapeError(f"x {tuple(x.shape)} and eps {tuple(eps.shape)} differ", dim="x")
    return x - eps


def fm_loss(v_pred, x, eps):
    target = velocity_target(x, eps)
    if v_pred.shape != target.shape:
        raise ShapeError(f"prediction {tuple(v_pred.shape)} vs target {tuple(target.shape)}", dim="v")
    return ((target - v_pred) ** 2).mean()


def make_flow_batch(x, generator):
    """Draw eps ~ N(0, 1) and t ~ U[0, 1] per sample and build the training pair."""
    eps = torch.randn(x.shape, generator=generator, dtype=x.dtype)
    t = torch.rand(x.shape[0], generator=generator, dtype=x.dtype)
    return FlowBatch(x, eps, t, interpolate(x, eps, t), velocity_target(x, eps))


def initial_noise(shape, seed, dtype=torch.float32):
    """Standard normal draws. ``seed`` is an int for the whole batch or one int per row."""
    if isinstance(seed, int):
        g = torch.Generator().manual_seed(seed)
        return torch.randn(shape, generator=g, dtype=dtype)
    seeds = list(seed)
    if len(seeds) != shape[0]:
        raise ShapeError(f"{len(seeds)} seeds for a batch of {shape[0]}", dim="batch")
    rows = [torch.randn(shape[1:], generator=torch.Generator().manual_seed(int(s)), dtype=dtype) for s in seeds]
    return torch.stack(rows)


@torch.no_grad()
def euler_sample(velocity_fn, mask_tokens, shape, steps=200, seed=0, dtype=torch.float32):
    """Integrate dz/dt = v(z, t, mask_tokens) from noise at t = 0 to t = 1.

    Forward Euler with ``steps`` uniform steps at t_k = k / steps.
    """
    if steps < 1:
        raise PreconditionError(f"steps must be >= 1, got {steps}")
    z = initial_noise(shape, seed, dtype)
    dt = 1.0 / steps
    for k in range(steps):
        t = torch.full((shape[0],), k / steps, dtype=dtype)
        v = velocity_fn(z, t, mask_tokens)
        if not torch.isfinite(v).all():
            raise NumericError(f"velocity became non-finite at sampler step {k}", where=f"step {k}")
        z = z + v * dt
    return z
