import math
import subprocess
import sys
import textwrap
import time

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sisma.blocks import SismaBlock
from sisma.data import CIRCLE, SQUARE, Shape, make_shapes_dataset
from sisma.errors import BenchLockError, PreconditionError, SismaError, ValidationError
from sisma.evaluation import (
    BenchReport,
    diversity_score,
    end_to_end_report,
    gradcheck,
    gradcheck_suite,
    loglog_slope,
    mask_adherence_iou,
    parameter_groups,
    randomize_parameters,
    scan_scaling_bench,
    segment_by_color,
    segmentation_iou,
)
from sisma.model import build_model, preset


# ---------------------------------------------------------------- IoU

def test_iou_examples():
    a = np.array([[0, 1], [1, 1]])
    b = np.array([[0, 1], [0, 1]])
    rep = segmentation_iou(a, b, 4)
    assert rep.per_class == {0: 0.5, 1: 2 / 3}
    assert rep.mean == pytest.approx((0.5 + 2 / 3) / 2)
    assert segmentation_iou(a, a, 4).mean == 1.0
    assert "mean" in rep.table()


def test_iou_shape_mismatch():
    with pytest.raises(ValidationError):
        segmentation_iou(np.zeros((2, 2)), np.zeros((2, 3)), 4)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_iou_is_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.integers(0, 4, (2, 8, 8))
    ra, rb = segmentation_iou(a, b, 4), segmentation_iou(b, a, 4)
    assert ra.per_class == rb.per_class
    assert all(0 <= v <= 1 for v in ra.per_class.values())


def lens_iou(r, d):
    lens = 2 * r * r * math.acos(d / (2 * r)) - (d / 2) * math.sqrt(4 * r * r - d * d)
    return lens / (2 * math.pi * r * r - lens)


def test_shifted_circle_matches_lens_area():
    size, r = 256, 60.0
    centers = np.arange(size) + 0.5
    px, py = np.meshgrid(centers, centers)
    mask = Shape(CIRCLE, 128, 128, r).contains(px, py).astype(np.int64)
    shifted = Shape(CIRCLE, 128 + r / 2, 128, r).contains(px, py)
    image = np.full((3, size, size), -0.2)
    image[:, shifted] = np.array([0.9, -0.5, -0.5])[:, None]
    rep = mask_adherence_iou(image, mask)
    assert abs(rep.per_class[CIRCLE] - lens_iou(r, r / 2)) <= 0.03


def test_ground_truth_images_score_perfectly():
    for s in make_shapes_dataset(50, 32, 2):
        assert mask_adherence_iou(s.image, s.mask).mean == 1.0


def test_segment_by_color_margin():
    img = np.zeros((3, 1, 3))
    img[:, 0, 0] = [0.5, 0.45, 0.0]  # margin 0.05: undecided
    img[:, 0, 1] = [0.0, 0.6, 0.3]   # green wins by 0.3
    img[:, 0, 2] = [0.0, 0.1, 0.9]   # blue
    assert segment_by_color(img).tolist() == [[0, SQUARE, 3]]


def test_adherence_rejects_other_palettes():
    with pytest.raises(ValidationError):
        mask_adherence_iou(np.zeros((3, 4, 4)), np.zeros((4, 4), np.int64), num_classes=19)
    with pytest.raises(ValidationError):
        mask_adherence_iou(np.zeros((3, 4, 4)), np.full((4, 4), 7))
    with pytest.raises(ValidationError):
        segment_by_color(np.zeros((4, 4)))


# ---------------------------------------------------------------- diversity

def test_diversity_examples():
    assert diversity_score(np.zeros((3, 2, 2))) == 0.0
    x = np.stack([np.zeros((2, 2)), np.ones((2, 2)), 3 * np.ones((2, 2))])
    assert diversity_score(x) == pytest.approx((1 + 3 + 2) / 3)
    with pytest.raises(PreconditionError):
        diversity_score(np.zeros((1, 2, 2)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 10))
def test_diversity_properties(seed, scale):
    x = np.random.default_rng(seed).normal(size=(4, 3, 5))
    d = diversity_score(x)
    assert d >= 0
    assert diversity_score(x[::-1]) == pytest.approx(d)
    assert diversity_score(x * scale) == pytest.approx(d * scale)
    assert diversity_score(x + 7.0) == pytest.approx(d)


# ---------------------------------------------------------------- scaling bench

def linear_work(L):
    buf = np.ones(L * 64)
    return lambda: buf.sum()


def test_bench_reports_and_auto_repeats(tmp_path):
    rep = scan_scaling_bench(linear_work, [64, 128, 512], trials=5, name="lin", lock_path=tmp_path / "l")
    assert rep.name == "lin" and rep.lengths == [64, 128, 512]
    assert all(r > 1 for r in rep.repetitions)
    assert all(lo <= m <= hi for lo, m, hi in zip(rep.minimum, rep.median, rep.maximum))
    assert len(rep.records()) == 4 and "slope" in rep.records()[-1]
    assert "environment" in rep.records()[-1] and "lin" in rep.table()


def test_bench_preconditions(tmp_path):
    with pytest.raises(PreconditionError):
        scan_scaling_bench(linear_work, [64, 512], trials=3, lock_path=tmp_path / "l")
    with pytest.raises(PreconditionError):
        scan_scaling_bench(linear_work, [64, 256], lock_path=tmp_path / "l")
    with pytest.raises(ValidationError):
        BenchReport("x", [2, 1], [1.0, 1.0], [1.0, 1.0], [1.0, 1.0], [1, 1], 0.0)


def test_inadequate_timer_is_reported(tmp_path):
    with pytest.raises(SismaError, match="timer resolution inadequate"):
        scan_scaling_bench(linear_work, [64, 512], min_time=10.0, max_reps=4, lock_path=tmp_path / "l")


def test_loglog_slope_of_power_laws():
    L = np.array([512, 1024, 2048, 4096])
    assert loglog_slope(L, 3e-9 * L) == pytest.approx(1.0)
    assert loglog_slope(L, 1e-12 * L ** 2.0) == pytest.approx(2.0)


def test_concurrent_bench_is_refused(tmp_path, monkeypatch):
    lock = tmp_path / "bench.lock"
    holder = subprocess.Popen([sys.executable, "-c", textwrap.dedent(f"""
        import sys, time
        from filelock import FileLock
        with FileLock({str(lock)!r}):
            print("held", flush=True)
            time.sleep(30)
    """)], stdout=subprocess.PIPE, text=True)
    try:
        assert holder.stdout.readline().strip() == "held"
        monkeypatch.setenv("SISMA_BENCH_LOCK", str(lock))
        with pytest.raises(BenchLockError) as info:
            scan_scaling_bench(linear_work, [64, 512])
        assert info.value.exit_code == 3
    finally:
        holder.kill()
        holder.wait()
    time.sleep(0.1)
    scan_scaling_bench(linear_work, [64, 512], lock_path=lock)


# ---------------------------------------------------------------- gradient checks

def test_gradcheck_on_quadratic_toy():
    g = torch.Generator().manual_seed(0)
    w = torch.randn(5, 3, generator=g, dtype=torch.float64, requires_grad=True)
    b = torch.randn(5, generator=g, dtype=torch.float64, requires_grad=True)
    x = torch.randn(7, 3, generator=g, dtype=torch.float64)
    rep = gradcheck(lambda: ((x @ w.T + b) ** 2).sum(), {"w": [w], "b": [b]})
    assert rep.passed and rep.max_rel_error < 1e-9
    assert [grp.coordinates for grp in rep.groups] == [15, 5]


def block_groups():
    torch.manual_seed(0)
    block = randomize_parameters(SismaBlock(4, d_state=2).double())
    x = torch.randn(1, 3, 4, dtype=torch.float64, requires_grad=True)
    s = torch.randn(1, 3, 4, dtype=torch.float64)
    c = torch.randn(1, 4, dtype=torch.float64)
    groups = {}
    for name, p in block.named_parameters():
        groups.setdefault(name.split(".")[0], []).append(p)
    groups["x"] = [x]
    return (lambda: block(x, s, c).pow(2).sum()), groups


def test_gradcheck_on_full_block():
    loss, groups = block_groups()
    rep = gradcheck(loss, groups, coords=64)
    assert rep.passed and rep.max_rel_error < 1e-5, rep.table()


def test_fault_injection_is_named():
    loss, groups = block_groups()
    rep = gradcheck(loss, groups, fault_group="cross_mamba")
    assert not rep.passed
    assert rep.failing() == ["cross_mamba"]
    with pytest.raises(ValidationError):
        gradcheck(loss, groups, fault_group="nope")


def test_parameter_groups_cover_model():
    model = build_model(preset("tiny"))
    groups = parameter_groups(model)
    assert "blocks.0.cross_mamba" in groups and "x_embed" in groups
    assert sum(p.numel() for ps in groups.values() for p in ps) == sum(p.numel() for p in model.parameters())


def test_tiny_suite_passes_and_flags_faults():
    rep = gradcheck_suite(preset("tiny"), coords=8)
    assert rep.passed, rep.table()
    assert {"input.z", "input.t"} <= {g.name for g in rep.groups}
    bad = gradcheck_suite(preset("tiny"), coords=8, fault_group="final")
    assert bad.failing() == ["final"]


# ---------------------------------------------------------------- end-to-end wiring

def test_end_to_end_report_wiring():
    model = build_model(preset("mini"))
    masks = np.stack([s.mask for s in make_shapes_dataset(3, 16, 0)])
    rep = end_to_end_report(model, masks, seeds_per_mask=2, steps=2)
    assert len(rep.per_mask_iou) == 3 and len(rep.per_mask_diversity) == 3
    # an untrained model integrates a zero field: samples are the seed noise
    assert all(d > 0.05 for d in rep.per_mask_diversity)
    assert rep.diverse_fraction == 1.0
    assert "mean_iou" in rep.summary()
