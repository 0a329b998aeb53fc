"""Verification harness: mask adherence, diversity, scan scaling and gradient checks."""

import itertools
import json
import os
import platform
import statistics
import tempfile
import time
from dataclasses import dataclass, field

import numba
import numpy as np
import torch
from filelock import FileLock, Timeout

from .data import BACKGROUND, CLASS_NAMES, DOMINANT_CHANNEL, SHAPE_CLASSES
from .errors import BenchLockError, PreconditionError, SismaError, ValidationError

DOMINANCE_MARGIN = 0.1
DEFAULT_LOCK = os.path.join(tempfile.gettempdir(), "sisma-bench.lock")


# ---------------------------------------------------------------- mask adherence

@dataclass
class IoUReport:
    per_class: dict  # class id -> IoU, only classes present in either map
    mean: float

    def table(self):
        rows = [f"{CLASS_NAMES[k] if k < len(CLASS_NAMES) else k:<12} {v:.4f}" for k, v in self.per_class.items()]
        rows.append(f"{'mean':<12} {self.mean:.4f}")
        return "\n".join(rows)


def segment_by_color(image, margin=DOMINANCE_MARGIN):
    """Class map of a shapes-palette image (3, h, w) by channel dominance.

    A pixel belongs to the shape class whose colour channel beats both others
    by at least ``margin``; anything less decisive is background.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValidationError(f"expected a (3, h, w) RGB image, got shape {img.shape}")
    top2 = np.sort(img, axis=0)[-2:]
    winner = np.argmax(img, axis=0)
    decisive = top2[1] - top2[0] >= margin
    channel_class = np.zeros(3, dtype=np.int64)
    for cls, ch in DOMINANT_CHANNEL.items():
        channel_class[ch] = cls
    return np.where(decisive, channel_class[winner], BACKGROUND)


def segmentation_iou(seg_a, seg_b, num_classes):
    """Per-class IoU of two class maps; classes absent from both are left out."""
    a, b = np.asarray(seg_a), np.asarray(seg_b)
    if a.shape != b.shape:
        raise ValidationError(f"segmentations differ in shape: {a.shape} vs {b.shape}")
    per_class = {}
    for k in range(num_classes):
        ia, ib = a == k, b == k
        union = np.count_nonzero(ia | ib)
        if union:
            per_class[k] = np.count_nonzero(ia & ib) / union
    mean = float(np.mean(list(per_class.values()))) if per_class else 1.0
    return IoUReport(per_class, mean)


def mask_adherence_iou(generated, mask, num_classes=SHAPE_CLASSES, margin=DOMINANCE_MARGIN):
    """Score a generated shapes image against its conditioning class map."""
    mask = np.asarray(mask)
    if num_classes != SHAPE_CLASSES or (mask.size and (mask.min() < 0 or mask.max() >= SHAPE_CLASSES)):
        raise ValidationError("mask adherence is defined only for the 4-class shapes palette")
    seg = segment_by_color(generated, margin)
    if seg.shape != mask.shape:
        raise ValidationError(f"image {seg.shape} and mask {mask.shape} differ in size")
    return segmentation_iou(seg, mask, SHAPE_CLASSES)


# ---------------------------------------------------------------- diversity

def diversity_score(samples):
    """Mean over unordered pairs of the mean absolute pixel difference."""
    x = samples.to(torch.float64) if torch.is_tensor(samples) \
        else torch.as_tensor(np.ascontiguousarray(samples), dtype=torch.float64)
    if x.shape[0] < 2:
        raise PreconditionError(f"diversity needs at least 2 samples, got {x.shape[0]}")
    flat = x.reshape(x.shape[0], -1)
    dists = [float((flat[i] - flat[j]).abs().mean()) for i, j in itertools.combinations(range(len(flat)), 2)]
    return float(np.mean(dists))


# ---------------------------------------------------------------- scaling benchmark

def environment_fingerprint():
    return {
        "python": platform.python_version(),
        "platform": platform.platform(),
        "machine": platform.machine(),
        "processor": platform.processor() or "unknown",
        "cpus": os.cpu_count(),
        "numpy": np.__version__,
        "torch": torch.__version__,
        "numba": numba.__version__,
        "torch_threads": torch.get_num_threads(),
    }


@dataclass
class BenchReport:
    name: str
    lengths: list
    median: list
    minimum: list
    maximum: list
    repetitions: list
    slope: float
    environment: dict = field(default_factory=dict)

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.lengths, self.lengths[1:])):
            raise ValidationError(f"lengths must be strictly increasing: {self.lengths}")
        if any(t <= 0 for t in self.median):
            raise ValidationError("benchmark times must be positive")

    def table(self):
        rows = [f"{self.name}: log-log slope {self.slope:.3f}",
                f"{'L':>8} {'median s':>12} {'min s':>12} {'max s':>12} {'reps':>6}"]
        for row in zip(self.lengths, self.median, self.minimum, self.maximum, self.repetitions):
            rows.append(f"{row[0]:>8d} {row[1]:>12.6f} {row[2]:>12.6f} {row[3]:>12.6f} {row[4]:>6d}")
        return "\n".join(rows)

    def records(self):
        """Machine-readable line records, one JSON object per length plus a summary."""
        out = [json.dumps({"bench": self.name, "L": L, "median_s": m, "min_s": lo, "max_s": hi, "reps": r})
               for L, m, lo, hi, r in zip(self.lengths, self.median, self.minimum, self.maximum, self.repetitions)]
        out.append(json.dumps({"bench": self.name, "slope": self.slope, "environment": self.environment}))
        return out


def loglog_slope(lengths, times):
    return float(np.polyfit(np.log(lengths), np.log(times), 1)[0])


def _timer_resolution():
    return time.get_clock_info("perf_counter").resolution


def _calibrate_reps(fn, min_time, max_reps):
    reps = 1
    while True:
        t0 = time.perf_counter()
        for _ in range(reps):
            fn()
        elapsed = time.perf_counter() - t0
        if elapsed >= min_time:
            return reps
        if reps >= max_reps:
            raise SismaError(
                f"timer resolution inadequate: {reps} repetitions took {elapsed:.2e}s (< {min_time:.2e}s)")
        reps = min(reps * 2, max_reps)


def scan_scaling_bench(workload, lengths, trials=5, name=None, min_time=None, max_reps=1 << 20,
                       lock_path=None):
    """Median wall-clock of ``workload(L)()`` per length and the fitted log-log slope.

    ``workload(L)`` does all setup and returns a zero-argument callable that is
    timed. Short callables are repeated until one trial lasts ``min_time``
    (default: 1000 timer ticks, at least 2 ms). Only one benchmark may run at
    a time per lock file (``SISMA_BENCH_LOCK`` or ``lock_path``).
    """
    lengths = [int(L) for L in lengths]
    if trials < 5:
        raise PreconditionError(f"need at least 5 trials for a median, got {trials}")
    if len(lengths) < 2 or lengths[-1] < 8 * lengths[0]:
        raise PreconditionError(f"lengths must span at least 8x, got {lengths}")
    if min_time is None:
        min_time = max(1000 * _timer_resolution(), 2e-3)
    lock = FileLock(lock_path or os.environ.get("SISMA_BENCH_LOCK", DEFAULT_LOCK))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise BenchLockError(f"another benchmark holds the lock {lock.lock_file}") from None
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        med, lo, hi, reps_used = [], [], [], []
        for L in lengths:
            fn = workload(L)
            fn()  # warm-up (compilation, caches)
            reps = _calibrate_reps(fn, min_time, max_reps)
            times = []
            for _ in range(trials):
                t0 = time.perf_counter()
                for _ in range(reps):
                    fn()
                times.append((time.perf_counter() - t0) / reps)
            med.append(statistics.median(times))
            lo.append(min(times))
            hi.append(max(times))
            reps_used.append(reps)
    finally:
        torch.set_num_threads(threads)
        lock.release()
    return BenchReport(name or getattr(workload, "__name__", "workload"), lengths, med, lo, hi, reps_used,
                       loglog_slope(lengths, med), environment_fingerprint())


def prefix_sum_workload(L, width=16):
    """O(L) calibration: running sum over L * width contiguous values.

    The largest size (1 MB per array at L = 8192) stays cache-resident, so the
    fit measures the algorithm rather than a cache-to-memory transition.
    """
    x = np.random.default_rng(0).standard_normal(L * width)
    out = np.empty_like(x)
    return lambda: np.cumsum(x, out=out)


@numba.njit(cache=True)
def _pairwise_abs_sum(x):
    total = 0.0
    for i in range(x.shape[0]):
        xi = x[i]
        for j in range(x.shape[0]):
            total += abs(xi - x[j])
    return total


def pairwise_workload(L):
    """O(L^2) calibration: naive double loop over all pairs."""
    x = np.random.default_rng(0).standard_normal(L)
    return lambda: _pairwise_abs_sum(x)


def chunked_scan_workload(L, channels=16, state_dim=16, chunk_len=64):
    """The chunked numpy scan at fixed E and N."""
    from .ssm_core import DiagSSM, ScanInputs, selective_scan_chunked

    rng = np.random.default_rng(0)
    inputs = ScanInputs(rng.standard_normal((L, channels)), rng.standard_normal((L, state_dim)),
                        rng.standard_normal((L, state_dim)), rng.uniform(1e-3, 0.1, (L, channels)))
    ssm = DiagSSM.init(channels, state_dim)
    return lambda: selective_scan_chunked(inputs, ssm, chunk_len=chunk_len)


def kernel_scan_workload(L, channels=16, state_dim=16):
    """The compiled training kernel (forward only) at fixed E and N."""
    from .ssm_core import s4d_real_log, selective_scan

    g = torch.Generator().manual_seed(0)
    u = torch.randn(1, L, channels, generator=g)
    delta = torch.rand(1, L, channels, generator=g) * 0.1 + 1e-3
    A = -torch.exp(torch.as_tensor(s4d_real_log(channels, state_dim), dtype=torch.float32))
    bmat = torch.randn(1, L, state_dim, generator=g)
    cmat = torch.randn(1, L, state_dim, generator=g)
    d = torch.ones(channels)
    return lambda: selective_scan(u, delta, A, bmat, cmat, d)


WORKLOADS = {
    "prefix_sum": prefix_sum_workload,
    "pairwise": pairwise_workload,
    "chunked_scan": chunked_scan_workload,
    "kernel_scan": kernel_scan_workload,
}


# ---------------------------------------------------------------- gradient checks

@dataclass
class GradGroup:
    name: str
    max_rel_error: float
    coordinates: int
    passed: bool


@dataclass
class GradcheckReport:
    groups: list
    tolerance: float

    @property
    def passed(self):
        return all(g.passed for g in self.groups)

    @property
    def max_rel_error(self):
        return max((g.max_rel_error for g in self.groups), default=0.0)

    def failing(self):
        return [g.name for g in self.groups if not g.passed]

    def table(self):
        width = max((len(g.name) for g in self.groups), default=5)
        rows = [f"{g.name:<{width}}  {g.coordinates:>4d}  {g.max_rel_error:.3e}  {'ok' if g.passed else 'FAIL'}"
                for g in self.groups]
        rows.append(f"{'overall':<{width}}  {'':>4}  {self.max_rel_error:.3e}  {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(rows)


def gradcheck(loss_fn, groups, coords=32, step=1e-5, tol=1e-4, seed=0, fault_group=None, fault_scale=1.01):
    """Compare autograd gradients with central differences.

    ``groups`` maps a name to a list of leaf tensors that ``loss_fn()`` reads.
    Up to ``coords`` coordinates are drawn per group. The error of one
    coordinate is |a - n| / max(|a|, |n|, floor), where floor is 1e-3 of the
    largest numerical gradient in the group (plus 1e-12), so coordinates whose
    gradient is negligible for the group are judged on an absolute scale.
    ``fault_group`` scales that group's analytic gradient by ``fault_scale``.
    """
    if fault_group is not None and fault_group not in groups:
        raise ValidationError(f"unknown gradient group {fault_group!r}")
    tensors = [t for ts in groups.values() for t in ts]
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    analytic = {id(t): (g if g is not None else torch.zeros_like(t)) for t, g in zip(tensors, grads)}
    rng = np.random.default_rng(seed)
    report = []
    for name, ts in groups.items():
        sizes = [t.numel() for t in ts]
        total = sum(sizes)
        picks = rng.choice(total, size=min(coords, total), replace=False)
        offsets = np.cumsum([0] + sizes)
        a_vals, n_vals = [], []
        for flat in np.sort(picks):
            which = int(np.searchsorted(offsets, flat, side="right") - 1)
            t, i = ts[which], int(flat - offsets[which])
            view = t.data.view(-1)
            orig = view[i].item()
            with torch.no_grad():
                view[i] = orig + step
                up = loss_fn().item()
                view[i] = orig - step
                down = loss_fn().item()
                view[i] = orig
            a = analytic[id(t)].reshape(-1)[i].item()
            if name == fault_group:
                a *= fault_scale
            a_vals.append(a)
            n_vals.append((up - down) / (2 * step))
        a_arr, n_arr = np.array(a_vals), np.array(n_vals)
        floor = 1e-3 * np.abs(n_arr).max() + 1e-12
        rel = np.abs(a_arr - n_arr) / np.maximum(np.maximum(np.abs(a_arr), np.abs(n_arr)), floor)
        err = float(rel.max())
        report.append(GradGroup(name, err, len(picks), err < tol))
    return GradcheckReport(report, tol)


def parameter_groups(model):
    """Group parameters by top-level module, splitting blocks into their sub-layers."""
    groups = {}
    for name, p in model.named_parameters():
        parts = name.split(".")
        key = ".".join(parts[:3]) if parts[0] == "blocks" else parts[0]
        groups.setdefault(key, []).append(p)
    return groups


def randomize_parameters(model, scale=0.2, seed=0):
    """Perturb every parameter so no gradient path is silenced by zero-initialisation."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return model


def gradcheck_suite(config, seed=0, batch=2, coords=32, step=1e-5, tol=1e-4, fault_group=None):
    """Gradient check of fm_loss over the full model at 64-bit.

    Covers every parameter group plus the latent and timestep inputs. The model
    is randomised first, since the zero-initialised gates would otherwise
    block gradients to everything upstream of the output head.
    """
    from .flow_match import fm_loss
    from .model import build_model

    model = randomize_parameters(build_model(config, seed=seed, dtype=torch.float64), seed=seed)
    g = torch.Generator().manual_seed(seed + 1)
    c = config
    shape = (batch, c.latent_channels, c.latent_size, c.latent_size)
    x = torch.randn(shape, generator=g, dtype=torch.float64)
    eps = torch.randn(shape, generator=g, dtype=torch.float64)
    z = torch.randn(shape, generator=g, dtype=torch.float64).requires_grad_(True)
    t = (0.1 + 0.8 * torch.rand(batch, generator=g, dtype=torch.float64)).requires_grad_(True)
    mask = torch.randint(0, c.mask_classes, (batch, c.latent_size, c.latent_size), generator=g)
    groups = parameter_groups(model)
    groups["input.z"] = [z]
    groups["input.t"] = [t]
    return gradcheck(lambda: fm_loss(model(z, t, mask), x, eps), groups, coords=coords, step=step, tol=tol,
                     seed=seed, fault_group=fault_group)


# ---------------------------------------------------------------- end-to-end experiment

@dataclass
class EndToEndReport:
    mean_iou: float
    per_mask_iou: list
    per_mask_diversity: list
    diversity_threshold: float

    @property
    def diverse_fraction(self):
        return float(np.mean([d > self.diversity_threshold for d in self.per_mask_diversity]))

    def summary(self):
        return (f"masks={len(self.per_mask_iou)} mean_iou={self.mean_iou:.4f} "
                f"diverse_fraction={self.diverse_fraction:.3f} "
                f"median_diversity={float(np.median(self.per_mask_diversity)):.4f}")


def end_to_end_report(model, masks, seeds_per_mask=8, steps=200, diversity_threshold=0.05, batch_size=64):
    """Sample ``seeds_per_mask`` images per mask and score adherence and diversity.

    Mean IoU averages over every (mask, seed) sample; diversity is scored per
    mask over its seeds. Seeds are 0..k-1 for every mask.
    """
    from .model import sample

    masks = np.asarray(masks)
    k = seeds_per_mask
    rep_masks = np.repeat(masks, k, axis=0)
    seeds = list(range(k)) * len(masks)
    images = sample(model, rep_masks, seeds, steps=steps, batch_size=batch_size).numpy()
    ious, divs = [], []
    for i, mask in enumerate(masks):
        group = images[i * k:(i + 1) * k]
        ious.append(float(np.mean([mask_adherence_iou(im, mask).mean for im in group])))
        divs.append(diversity_score(group) if k >= 2 else 0.0)
    return EndToEndReport(float(np.mean(ious)), ious, divs, diversity_threshold)
