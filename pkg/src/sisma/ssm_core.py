"""Diagonal selective state-space scan and the Self/Cross-Mamba layers.

Two layers of API live here:

* numpy reference routines (``zoh_discretize``, ``selective_scan_sequential``,
  ``selective_scan_chunked``) that define the recurrence contract and serve as
  oracles;
* torch modules (``SelfMamba``, ``CrossMamba``) whose scan runs through
  :class:`SelectiveScan`, a compiled kernel with an analytic backward.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import _kernels
from .errors import NumericError, PreconditionError, ShapeError

MODES = ("simplified", "exact")
DEFAULT_MODE = "simplified"


def s4d_real_log(channels, state_dim):
    """log(-A) for the S4D-real initialisation A[e, i] = -(i + 1)."""
    return np.log(np.tile(np.arange(1, state_dim + 1, dtype=np.float64), (channels, 1)))


@dataclass
class DiagSSM:
    a_log: np.ndarray  # (E, N), stores log(-A)
    d_skip: np.ndarray  # (E,)

    def __post_init__(self):
        self.a_log = np.asarray(self.a_log, dtype=np.float64)
        self.d_skip = np.asarray(self.d_skip, dtype=np.float64)
        if self.a_log.ndim != 2 or min(self.a_log.shape) < 1:
            raise ShapeError(f"a_log must be a non-empty (E, N) matrix, got {self.a_log.shape}", dim="a_log")
        if self.d_skip.shape != (self.channels,):
            raise ShapeError(f"d_skip must have shape ({self.channels},), got {self.d_skip.shape}", dim="E")
        if not (np.isfinite(self.a_log).all() and np.isfinite(self.d_skip).all()):
            raise PreconditionError("DiagSSM entries must be finite")

    @classmethod
    def init(cls, channels, state_dim=16):
        return cls(s4d_real_log(channels, state_dim), np.ones(channels))

    @property
    def channels(self):
        return self.a_log.shape[0]

    @property
    def state_dim(self):
        return self.a_log.shape[1]

    @property
    def A(self):
        return -np.exp(self.a_log)


class ScanInputs(NamedTuple):
    u: np.ndarray  # (..., L, E)
    b_seq: np.ndarray  # (..., L, N)
    c_seq: np.ndarray  # (..., L, N)
    delta_seq: np.ndarray  # (..., L, E), strictly positive
    h0: np.ndarray | None = None  # (..., E, N); zeros when omitted


class ScanOutputs(NamedTuple):
    y: np.ndarray
    h_final: np.ndarray


def zoh_discretize(a_diag, b_t, delta_t, mode=DEFAULT_MODE):
    """Zero-order-hold discretisation of a diagonal continuous system.

    ``a_bar = exp(delta * a)`` in both modes. ``b_bar`` is
    ``(exp(delta * a) - 1) / a * b`` in exact mode and ``delta * b`` in
    simplified mode. Arguments broadcast against each other.
    """
    a_diag = np.asarray(a_diag, dtype=np.float64)
    b_t = np.asarray(b_t, dtype=np.float64)
    delta_t = np.asarray(delta_t, dtype=np.float64)
    if mode not in MODES:
        raise PreconditionError(f"unknown discretisation mode {mode!r}; expected one of {MODES}")
    if not np.all(delta_t > 0):
        raise PreconditionError("delta must be strictly positive")
    if mode == "exact" and np.any(a_diag == 0):
        raise PreconditionError("exact ZOH needs a != 0 (degenerate divisor)")
    if not np.all(a_diag < 0):
        raise PreconditionError("diagonal state matrix must be strictly negative")
    da = delta_t * a_diag
    a_bar = np.exp(da)
    if mode == "exact":
        b_bar = np.expm1(da) / a_diag * b_t
    else:
        b_bar = delta_t * b_t
    return a_bar, b_bar


def _check_scan(inputs, ssm):
    u, b_seq, c_seq, delta = (np.asarray(v, dtype=np.float64) for v in inputs[:4])
    L, E = u.shape[-2:]
    N = ssm.state_dim
    if E != ssm.channels:
        raise ShapeError(f"u has {E} channels but the SSM has {ssm.channels}", dim="E")
    if delta.shape != u.shape:
        raise ShapeError(f"delta_seq shape {delta.shape} != u shape {u.shape}", dim="L" if delta.shape[-2:-1] != (L,) else "E")
    for name, arr in (("b_seq", b_seq), ("c_seq", c_seq)):
        if arr.shape[-2] != L:
            raise ShapeError(f"{name} has length {arr.shape[-2]}, expected L={L}", dim="L")
        if arr.shape[-1] != N:
            raise ShapeError(f"{name} has state width {arr.shape[-1]}, expected N={N}", dim="N")
    if L < 1:
        raise ShapeError("sequence length must be at least 1", dim="L")
    if not np.all(delta > 0):
        raise PreconditionError("delta_seq must be strictly positive")
    batch = u.shape[:-2]
    if inputs.h0 is None:
        h0 = np.zeros(batch + (E, N))
    else:
        h0 = np.asarray(inputs.h0, dtype=np.float64)
        if h0.shape[-2:] != (E, N):
            raise ShapeError(f"h0 has shape {h0.shape}, expected (..., {E}, {N})", dim="h0")
        h0 = np.broadcast_to(h0, batch + (E, N))
    return u, b_seq, c_seq, delta, h0


def _discretize_seq(delta, b_seq, A, mode):
    # delta (..., L, E), b_seq (..., L, N), A (E, N) -> a_bar, b_bar (..., L, E, N)
    da = delta[..., :, None] * A
    a_bar = np.exp(da)
    if mode == "exact":
        b_bar = np.expm1(da) / A * b_seq[..., None, :]
    else:
        b_bar = delta[..., :, None] * b_seq[..., None, :]
    return a_bar, b_bar


def selective_scan_sequential(inputs, ssm, mode=DEFAULT_MODE):
    """Reference recurrence, one step at a time.

    h_k = a_bar_k * h_{k-1} + b_bar_k * u_k and y_k = <c_k, h_k> + d * u_k,
    independently per channel.
    """
    if mode not in MODES:
        raise PreconditionError(f"unknown discretisation mode {mode!r}")
    u, b_seq, c_seq, delta, h0 = _check_scan(inputs, ssm)
    A = ssm.A
    L = u.shape[-2]
    h = h0.copy()
    y = np.empty_like(u)
    for k in range(L):
        a_bar, b_bar = _discretize_seq(delta[..., k:k + 1, :], b_seq[..., k:k + 1, :], A, mode)
        h = a_bar[..., 0, :, :] * h + b_bar[..., 0, :, :] * u[..., k, :, None]
        y[..., k, :] = (h * c_seq[..., k, None, :]).sum(-1) + ssm.d_skip * u[..., k, :]
    return ScanOutputs(y, h)


def selective_scan_chunked(inputs, ssm, mode=DEFAULT_MODE, chunk_len=64):
    """Same contract as :func:`selective_scan_sequential`, computed chunk-wise.

    Each chunk is summarised by the affine map h -> alpha * h + beta of its
    steps (computed for all chunks at once), the maps are composed across
    chunks, and the chunk-start states are then broadcast back inside every
    chunk. The sequential work is chunk_len + L / chunk_len steps.
    """
    if mode not in MODES:
        raise PreconditionError(f"unknown discretisation mode {mode!r}")
    if int(chunk_len) != chunk_len or chunk_len < 1:
        raise PreconditionError(f"chunk_len must be a positive integer, got {chunk_len}")
    chunk_len = int(chunk_len)
    u, b_seq, c_seq, delta, h0 = _check_scan(inputs, ssm)
    A = ssm.A
    batch = u.shape[:-2]
    L, E = u.shape[-2:]
    N = ssm.state_dim
    T = min(chunk_len, L)
    n_chunks = -(-L // T)
    pad = n_chunks * T - L
    if pad:
        # delta = 0 gives a_bar = 1, b_bar = 0: the identity step
        widths = [(0, 0)] * len(batch) + [(0, pad), (0, 0)]
        u_p, delta_p, b_p = (np.pad(v, widths) for v in (u, delta, b_seq))
    else:
        u_p, delta_p, b_p = u, delta, b_seq

    a_bar, b_bar = _discretize_seq(delta_p, b_p, A, mode)
    bx = b_bar * u_p[..., :, :, None]
    shape = batch + (n_chunks, T, E, N)
    a_bar = a_bar.reshape(shape)
    bx = bx.reshape(shape)

    local = np.empty(shape)
    decay = np.empty(shape)
    hl = np.zeros(batch + (n_chunks, E, N))
    pl = np.ones(batch + (n_chunks, E, N))
    for j in range(T):
        hl = a_bar[..., j, :, :] * hl + bx[..., j, :, :]
        pl = a_bar[..., j, :, :] * pl
        local[..., j, :, :] = hl
        decay[..., j, :, :] = pl

    starts = np.empty(batch + (n_chunks, E, N))
    h = h0
    for c in range(n_chunks):
        starts[..., c, :, :] = h
        h = decay[..., c, T - 1, :, :] * h + local[..., c, T - 1, :, :]

    states = local + decay * starts[..., :, None, :, :]
    states = states.reshape(batch + (n_chunks * T, E, N))[..., :L, :, :]
    y = (states * c_seq[..., :, None, :]).sum(-1) + ssm.d_skip * u
    return ScanOutputs(y, h)


class SelectiveScan(torch.autograd.Function):
    """Batched selective scan with the compiled forward and analytic backward.

    Shapes: u, delta (B, L, E); A (E, N); bmat, cmat (B, L, N); d (E,);
    h0 (B, E, N). Returns (y, h_final).
    """

    @staticmethod
    def forward(ctx, u, delta, A, bmat, cmat, d, h0, exact=False):
        tensors = [t.detach().contiguous() for t in (u, delta, A, bmat, cmat, d, h0)]
        y, h_final = _kernels.scan_forward(*(t.numpy() for t in tensors), bool(exact))
        ctx.save_for_backward(*tensors)
        ctx.exact = bool(exact)
        return torch.from_numpy(y), torch.from_numpy(h_final)

    @staticmethod
    def backward(ctx, dy, dh_final):
        saved = ctx.saved_tensors
        dy = torch.zeros_like(saved[0]) if dy is None else dy.contiguous()
        dh_final = torch.zeros_like(saved[6]) if dh_final is None else dh_final.contiguous()
        grads = _kernels.scan_backward(*(t.numpy() for t in saved), ctx.exact, dy.numpy(), dh_final.numpy())
        return (*(torch.from_numpy(g) for g in grads), None)


def selective_scan(u, delta, A, bmat, cmat, d, h0=None, mode=DEFAULT_MODE):
    if mode not in MODES:
        raise PreconditionError(f"unknown discretisation mode {mode!r}")
    if h0 is None:
        h0 = u.new_zeros(u.shape[0], A.shape[0], A.shape[1])
    return SelectiveScan.apply(u, delta, A, bmat, cmat, d, h0, mode == "exact")


def inverse_softplus(y):
    return y + torch.log(-torch.expm1(-y))


class _MambaMixer(nn.Module):
    """Shared body of the selective block.

    x -> in_proj -> (u, gate); u -> causal depthwise conv -> SiLU; the scan
    runs over u with selection parameters from ``_selection``; the result is
    gated by SiLU(gate) and projected back to d_model.
    """

    def __init__(self, d_model, d_cond, d_state=16, expand=2, d_conv=4, mode=DEFAULT_MODE,
                 dt_min=1e-3, dt_max=1e-1):
        super().__init__()
        if mode not in MODES:
            raise PreconditionError(f"unknown discretisation mode {mode!r}")
        self.d_model = d_model
        self.d_inner = expand * d_model
        self.d_state = d_state
        self.d_conv = d_conv
        self.mode = mode
        self.dt_range = (dt_min, dt_max)
        self.name = type(self).__name__
        E = self.d_inner
        self.in_proj = nn.Linear(d_model, 2 * E, bias=False)
        self.conv = nn.Conv1d(E, E, d_conv, groups=E, padding=d_conv - 1)
        self.proj_b = nn.Linear(d_cond, d_state, bias=False)
        self.proj_c = nn.Linear(E, d_state, bias=False)
        self.proj_delta = nn.Linear(d_cond, E)
        self.a_log = nn.Parameter(torch.from_numpy(s4d_real_log(E, d_state)).float())
        self.d_skip = nn.Parameter(torch.ones(E))
        self.out_proj = nn.Linear(E, d_model, bias=False)
        self.reset_parameters()

    def reset_parameters(self):
        for lin in (self.in_proj, self.proj_b, self.proj_c, self.proj_delta, self.out_proj):
            nn.init.normal_(lin.weight, std=lin.in_features ** -0.5)
        nn.init.normal_(self.conv.weight, std=self.d_conv ** -0.5)
        nn.init.zeros_(self.conv.bias)
        lo, hi = self.dt_range
        with torch.no_grad():
            dt = torch.empty(self.d_inner).uniform_(lo, hi)
            self.proj_delta.bias.copy_(inverse_softplus(dt))
            self.a_log.copy_(torch.from_numpy(s4d_real_log(self.d_inner, self.d_state)))
            self.d_skip.fill_(1.0)

    def content_stream(self, x):
        """Return (u, gate): the post-conv, post-SiLU scan input and the gate branch."""
        L = x.shape[1]
        u, gate = self.in_proj(x).chunk(2, dim=-1)
        u = self.conv(u.transpose(1, 2))[..., :L].transpose(1, 2)
        return F.silu(u), gate

    def _selection(self, u, cond):
        raise NotImplementedError

    def _mix(self, x, cond):
        if x.ndim == 2:
            return self._mix(x.unsqueeze(0), None if cond is None else cond.unsqueeze(0)).squeeze(0)
        if x.ndim != 3 or x.shape[-1] != self.d_model:
            raise ShapeError(f"{self.name}: expected (B, L, {self.d_model}) input, got {tuple(x.shape)}", dim="D")
        u, gate = self.content_stream(x)
        bmat, delta = self._selection(u, cond)
        cmat = self.proj_c(u)
        A = -torch.exp(self.a_log)
        y, _ = selective_scan(u, delta, A, bmat, cmat, self.d_skip, mode=self.mode)
        out = self.out_proj(y * F.silu(gate))
        if not torch.isfinite(out).all():
            raise NumericError(f"non-finite activation in {self.name}", where=self.name)
        return out


class SelfMamba(_MambaMixer):
    """Selective block where B, C and delta all come from the content stream."""

    def __init__(self, d_model, d_state=16, expand=2, d_conv=4, mode=DEFAULT_MODE):
        super().__init__(d_model, expand * d_model, d_state, expand, d_conv, mode)

    def _selection(self, u, cond):
        return self.proj_b(u), F.softplus(self.proj_delta(u))

    def forward(self, x):
        return self._mix(x, None)


class CrossMamba(_MambaMixer):
    """Selective block conditioned on a token-aligned sequence ``s_m``.

    B and delta are linear in ``s_m``; C, the scan input, the gate and the skip
    term come from the content stream of ``x``.
    """

    def __init__(self, d_model, d_cond=None, d_state=16, expand=2, d_conv=4, mode=DEFAULT_MODE):
        super().__init__(d_model, d_model if d_cond is None else d_cond, d_state, expand, d_conv, mode)
        self.d_cond = d_model if d_cond is None else d_cond

    def _selection(self, u, cond):
        return self.proj_b(cond), F.softplus(self.proj_delta(cond))

    def forward(self, x, s_m):
        if s_m.shape[:-1] != x.shape[:-1]:
            raise ShapeError(
                f"{self.name}: mask tokens {tuple(s_m.shape)} not aligned with content {tuple(x.shape)}", dim="L"
            )
        if s_m.shape[-1] != self.d_cond:
            raise ShapeError(f"{self.name}: mask tokens have width {s_m.shape[-1]}, expected {self.d_cond}", dim="D")
        return self._mix(x, s_m)
