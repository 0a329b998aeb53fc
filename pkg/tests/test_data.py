import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from sisma.data import (
    CIRCLE,
    DOMINANT_CHANNEL,
    SQUARE,
    TRIANGLE,
    PairDataset,
    SemanticMask,
    Shape,
    batch_indices,
    batch_iter,
    from_uint8,
    load_pair_folder,
    make_shapes_dataset,
    make_shapes_sample,
    one_hot,
    read_mask,
    save_pair_folder,
    to_uint8,
)
from sisma.errors import DatasetLoadError, MaskError, PreconditionError, ValidationError


def test_generator_is_deterministic():
    a = make_shapes_sample(32, 3, 17)
    b = make_shapes_sample(32, 3, 17)
    assert np.array_equal(a.image, b.image) and np.array_equal(a.mask, b.mask)
    c = make_shapes_sample(32, 3, 18)
    assert not np.array_equal(a.image, c.image)
    assert np.array_equal(make_shapes_dataset(20, 32, 3)[17].image, a.image)


def test_generator_output_ranges():
    s = make_shapes_sample(32, 0, 0)
    assert s.image.shape == (3, 32, 32) and s.image.dtype == np.float32
    assert s.mask.shape == (32, 32) and s.mask.dtype == np.int64
    assert s.image.min() >= -1 and s.image.max() <= 1
    assert set(np.unique(s.mask)) <= {0, 1, 2, 3}
    assert 1 <= len(s.shapes) <= 2


def test_generator_rejects_small_size():
    with pytest.raises(ValidationError):
        make_shapes_sample(8, 0, 0)
    with pytest.raises(ValidationError):
        make_shapes_dataset(0, 32, 0)


def test_colour_agrees_with_mask_over_many_samples():
    for s in make_shapes_dataset(100, 32, 1):
        img = s.image
        for kind, ch in DOMINANT_CHANNEL.items():
            px = img[:, s.mask == kind]
            if px.size == 0:
                continue
            others = np.delete(px, ch, axis=0)
            assert np.all(px[ch] - others.max(axis=0) >= 0.5 - 1e-6)
        bg = img[:, s.mask == 0]
        if bg.size:
            assert np.all(bg.max(axis=0) - bg.min(axis=0) <= 0.06 + 1e-6)


def barycentric_inside(px, py, verts):
    (x1, y1), (x2, y2), (x3, y3) = verts
    det = (y2 - y3) * (x1 - x3) + (x3 - x2) * (y1 - y3)
    l1 = ((y2 - y3) * (px - x3) + (x3 - x2) * (py - y3)) / det
    l2 = ((y3 - y1) * (px - x3) + (x1 - x3) * (py - y3)) / det
    l3 = 1 - l1 - l2
    return (l1 >= 0) & (l2 >= 0) & (l3 >= 0)


@settings(max_examples=30, deadline=None)
@given(st.floats(4, 12), st.floats(10, 20), st.floats(10, 20))
def test_triangle_matches_barycentric_oracle(r, cx, cy):
    verts = [(cx, cy - r), (cx - r * math.sqrt(3) / 2, cy + r / 2), (cx + r * math.sqrt(3) / 2, cy + r / 2)]
    rng = np.random.default_rng(0)
    px, py = rng.uniform(0, 32, 4000), rng.uniform(0, 32, 4000)
    ours = Shape(TRIANGLE, cx, cy, r).contains(px, py)
    oracle = barycentric_inside(px, py, verts)
    # disagreement only on the boundary to float tolerance
    assert np.mean(ours != oracle) == 0


def test_circle_and_square_areas():
    centers = np.arange(256) + 0.5
    px, py = np.meshgrid(centers, centers)
    circle = Shape(CIRCLE, 128, 128, 100).contains(px, py).sum()
    assert abs(circle - math.pi * 100 ** 2) / (math.pi * 100 ** 2) < 1e-3
    square = Shape(SQUARE, 128, 128, 100).contains(px, py).sum()
    assert square == 170 ** 2


def test_painter_order_last_shape_wins():
    s = make_shapes_dataset(200, 32, 0)
    overlapping = [x for x in s if len(x.shapes) == 2]
    assert overlapping
    for x in overlapping:
        centers = np.arange(32) + 0.5
        px, py = np.meshgrid(centers, centers)
        top = x.shapes[1].contains(px, py)
        assert np.all(x.mask[top] == x.shapes[1].kind)


def test_one_hot():
    ids = np.array([[0, 2], [1, 2]])
    out = one_hot(ids, 3)
    assert out.shape == (3, 2, 2) and out.dtype == np.float32
    assert np.array_equal(out.argmax(0), ids)
    assert np.all(out.sum(0) == 1)
    with pytest.raises(MaskError):
        one_hot(np.array([[3]]), 3)
    with pytest.raises(MaskError):
        SemanticMask(np.array([[0.5]]), 3)


def test_uint8_round_trip():
    img = np.random.default_rng(0).integers(0, 256, (5, 6, 3)).astype(np.uint8)
    assert np.array_equal(to_uint8(from_uint8(img)), img)


def test_folder_round_trip(tmp_path):
    ds = PairDataset.from_samples(make_shapes_dataset(6, 32, 0))
    save_pair_folder(ds, tmp_path)
    back, report = load_pair_folder(tmp_path / "images", tmp_path / "masks", 4, 32)
    assert report.ok and report.loaded == 6 and back.names == ds.names
    assert np.array_equal(back.masks, ds.masks)
    assert np.abs(back.images - ds.images).max() <= 1 / 127.5


def test_folder_errors_name_the_file(tmp_path):
    ds = PairDataset.from_samples(make_shapes_dataset(4, 32, 0))
    save_pair_folder(ds, tmp_path)
    (tmp_path / "masks" / "00001.png").unlink()
    Image.fromarray(np.full((32, 32), 9, np.uint8), mode="L").save(tmp_path / "masks" / "00002.png")
    (tmp_path / "masks" / "extra.png").write_bytes(b"junk")
    with pytest.raises(DatasetLoadError) as info:
        load_pair_folder(tmp_path / "images", tmp_path / "masks", 4, 32)
    report = info.value.report
    messages = {e.path.rsplit("/", 1)[-1]: e.reason for e in report.errors}
    assert "no matching mask" in messages["00001.png"]
    assert "[0, 4)" in messages["00002.png"]
    assert "no matching image" in messages["extra.png"]
    assert info.value.exit_code == 3
    lenient, report = load_pair_folder(tmp_path / "images", tmp_path / "masks", 4, 32, strict=False)
    assert lenient.names == ["00000", "00003"] and len(report.errors) == 3


def test_nearest_resize_keeps_class_set(tmp_path):
    ids = np.random.default_rng(0).integers(0, 19, (300, 400)).astype(np.uint8)
    Image.fromarray(ids, mode="L").save(tmp_path / "m.png")
    out = read_mask(tmp_path / "m.png", 19, 64)
    assert out.shape == (64, 64)
    assert set(np.unique(out)) <= set(np.unique(ids))


def test_rgb_mask_rejected(tmp_path):
    Image.new("RGB", (4, 4)).save(tmp_path / "m.png")
    with pytest.raises(MaskError, match="single-channel"):
        read_mask(tmp_path / "m.png", 4)


def test_batching_drops_last():
    ds = PairDataset.from_samples(make_shapes_dataset(10, 16, 0))
    batches = list(batch_iter(ds, 4, 0, 0))
    assert len(batches) == 2
    images, masks = batches[0]
    assert images.shape == (4, 3, 16, 16) and masks.shape == (4, 4, 16, 16)
    assert list(batch_iter(ds, 4, 0, 0))[1][0].tobytes() == batches[1][0].tobytes()


def test_batch_indices_cover_epochs_without_repeats():
    seen = np.concatenate([batch_indices(10, 3, 5, s) for s in range(3)])
    assert len(set(seen.tolist())) == 9
    assert not np.array_equal(batch_indices(10, 3, 5, 0), batch_indices(10, 3, 5, 3))


def test_batching_errors():
    empty = PairDataset(np.zeros((0, 3, 16, 16)), np.zeros((0, 16, 16), np.int64), 4, [])
    with pytest.raises(ValidationError):
        next(batch_iter(empty, 4, 0, 0))
    with pytest.raises(ValidationError):
        batch_indices(3, 4, 0, 0)
    with pytest.raises(PreconditionError):
        batch_indices(10, 0, 0, 0)
