import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from softft.data import (
    PROTOTYPES,
    DatasetSpec,
    batch_iter,
    cycled_batch,
    dataset_file_size,
    dual_batch_iter,
    dump_prototypes,
    gen_dataset,
    read_dataset,
    restrict_bias,
    subsample_categories,
    subsample_images,
    write_dataset,
)
from softft.errors import ConfigError, FormatError, RangeError

SMALL = DatasetSpec(num_classes=4, samples_per_class=6, seed=3)


def same(a, b):
    return (
        a.data.tobytes() == b.data.tobytes()
        and a.labels.tobytes() == b.labels.tobytes()
        and a.params.tobytes() == b.params.tobytes()
    )


def test_prototypes_distinct_binary_masks():
    assert PROTOTYPES.shape == (32, 16, 16)
    assert set(np.unique(PROTOTYPES)) <= {0.0, 1.0}
    flat = {p.tobytes() for p in PROTOTYPES}
    assert len(flat) == 32


def test_dump_prototypes(tmp_path):
    paths = dump_prototypes(tmp_path)
    assert len(paths) == 32
    assert paths[0].read_bytes().startswith(b"P2")


def test_empty_dataset():
    ds = gen_dataset(DatasetSpec(num_classes=3, samples_per_class=0))
    assert len(ds) == 0
    assert ds.data.shape == (0, 1, 16, 16)


def test_generation_deterministic():
    assert same(gen_dataset(SMALL), gen_dataset(SMALL))
    assert not same(gen_dataset(SMALL), gen_dataset(DatasetSpec(num_classes=4, samples_per_class=6, seed=4)))


def test_class_counts_and_ranges():
    ds = gen_dataset(SMALL)
    assert ds.class_counts().tolist() == [6] * 4
    assert ds.data.min() >= 0.0 and ds.data.max() <= 1.0
    for name, col in (("rotation", 0), ("translation", 1), ("translation", 2), ("scale", 3), ("noise", 4)):
        lo, hi = getattr(SMALL, name)
        assert np.all((ds.params[:, col] >= lo) & (ds.params[:, col] <= hi))


def test_clean_render_equals_prototype():
    spec = DatasetSpec(
        num_classes=5, samples_per_class=3, rotation=(0, 0), translation=(0, 0), scale=(1, 1), noise=(0, 0),
        class_offset=7,
    )
    ds = gen_dataset(spec)
    for i in range(len(ds)):
        np.testing.assert_array_equal(ds.data[i, 0], PROTOTYPES[7 + ds.labels[i]])


def test_too_many_prototypes():
    with pytest.raises(ConfigError):
        DatasetSpec(num_classes=33)
    with pytest.raises(ConfigError):
        DatasetSpec(num_classes=5, class_offset=30)
    with pytest.raises(ConfigError):
        DatasetSpec(num_classes=1)


def test_gauss_mode():
    spec = DatasetSpec(mode="gauss", num_classes=3, samples_per_class=50, dim=6, rotation=(0, 0), translation=(0, 0),
                       scale=(1, 1), noise=(0.01, 0.01))
    ds = gen_dataset(spec)
    assert ds.data.shape == (150, 6)
    means = np.stack([ds.data[ds.labels == k].mean(axis=0) for k in range(3)])
    # class means stay separated relative to the tiny noise
    d = np.linalg.norm(means[:, None] - means[None], axis=-1)
    assert d[np.triu_indices(3, 1)].min() > 0.1


def test_restrict_to_point():
    spec = restrict_bias(SMALL, "rotation", (10, 10))
    ds = gen_dataset(spec)
    assert np.all(ds.params[:, 0] == 10)


def test_restrict_full_range_is_identity():
    assert restrict_bias(SMALL, "rotation", SMALL.rotation) == SMALL


def test_restrict_outside_range():
    with pytest.raises(RangeError):
        restrict_bias(SMALL, "rotation", (-200, 0))


@settings(max_examples=20, deadline=None)
@given(st.floats(-180, 180), st.floats(0, 90), st.integers(0, 1000))
def test_bias_containment(center, half, seed):
    lo, hi = max(-180, center - half), min(180, center + half)
    spec = restrict_bias(DatasetSpec(num_classes=2, samples_per_class=5, seed=seed), "rotation", (lo, hi))
    rot = gen_dataset(spec).params[:, 0]
    assert np.all((rot >= lo) & (rot <= hi))


def test_restrict_changes_only_that_field():
    spec = restrict_bias(SMALL, "rotation", (-15, 15))
    full, narrow = gen_dataset(SMALL), gen_dataset(spec)
    np.testing.assert_array_equal(full.params[:, 1:], narrow.params[:, 1:])


def test_subsample_categories_identity():
    ds = gen_dataset(SMALL)
    sub = subsample_categories(ds, 1.0, 0)
    assert same(sub, ds)
    assert sub.label_map == ds.label_map


def test_subsample_categories_too_few():
    ds = gen_dataset(DatasetSpec(num_classes=10, samples_per_class=2))
    with pytest.raises(ConfigError):
        subsample_categories(ds, 0.1, 0)


def test_subsample_categories_counting():
    ds = gen_dataset(DatasetSpec(num_classes=20, samples_per_class=3))
    sub = subsample_categories(ds, 0.5, 1)
    assert sub.num_classes == 10
    assert len(sub) == 10 * 3
    assert sub.class_counts().tolist() == [3] * 10
    # original labels survive the dense re-indexing
    assert set(sub.original_labels()) == set(sub.label_map)


def test_subsample_images_identity_and_counts():
    ds = gen_dataset(DatasetSpec(num_classes=3, samples_per_class=10))
    assert same(subsample_images(ds, 1.0, 5), ds)
    sub = subsample_images(ds, 0.25, 5)
    assert sub.class_counts().tolist() == [math.ceil(0.25 * 10)] * 3


def test_subsample_images_subset():
    ds = gen_dataset(DatasetSpec(num_classes=3, samples_per_class=10))
    sub = subsample_images(ds, 0.3, 5)
    rows = {(ds.data[i].tobytes(), int(ds.labels[i])) for i in range(len(ds))}
    assert all((sub.data[i].tobytes(), int(sub.labels[i])) in rows for i in range(len(sub)))


@settings(max_examples=25, deadline=None)
@given(st.floats(0.05, 1.0), st.floats(0.05, 1.0), st.integers(0, 50))
def test_subsample_images_nested(f1, f2, seed):
    f1, f2 = max(f1, f2), min(f1, f2)
    ds = gen_dataset(DatasetSpec(num_classes=3, samples_per_class=8, seed=1))
    big = {x.tobytes() for x in subsample_images(ds, f1, seed).data}
    small = {x.tobytes() for x in subsample_images(ds, f2, seed).data}
    assert small <= big


def test_dual_batches_counting():
    src = gen_dataset(DatasetSpec(num_classes=4, samples_per_class=25))
    tar = gen_dataset(DatasetSpec(num_classes=4, samples_per_class=16, domain="target"))
    batches = list(dual_batch_iter(src, tar, 32, seed=0, epoch=0))
    assert len(batches) == 2
    assert all(len(s.labels) == 32 and len(t.labels) == 32 for s, t in batches)


def test_every_target_sample_once_per_epoch():
    src = gen_dataset(DatasetSpec(num_classes=4, samples_per_class=25))
    tar = gen_dataset(DatasetSpec(num_classes=4, samples_per_class=16, domain="target"))
    seen = np.concatenate([t.indices for _, t in dual_batch_iter(src, tar, 16, seed=1, epoch=3)])
    assert sorted(seen.tolist()) == list(range(64))


def test_source_coverage():
    src = gen_dataset(DatasetSpec(num_classes=5, samples_per_class=20))
    tar = gen_dataset(DatasetSpec(num_classes=4, samples_per_class=8, domain="target"))
    B = 8
    per_epoch = len(tar) // B
    epochs = math.ceil(len(src) / (B * per_epoch))
    seen = set()
    for e in range(epochs):
        for s, _ in dual_batch_iter(src, tar, B, seed=2, epoch=e):
            seen.update(s.indices.tolist())
    assert seen == set(range(len(src)))


def test_source_stream_is_continuous_across_epochs():
    src = gen_dataset(DatasetSpec(num_classes=3, samples_per_class=7))
    tar = gen_dataset(DatasetSpec(num_classes=2, samples_per_class=5, domain="target"))
    drawn = np.concatenate(
        [s.indices for e in range(4) for s, _ in dual_batch_iter(src, tar, 3, seed=9, epoch=e)]
    )
    direct = cycled_batch(src, len(drawn), 9, 0).indices
    np.testing.assert_array_equal(drawn, direct)


def test_batch_errors():
    ds = gen_dataset(DatasetSpec(num_classes=2, samples_per_class=2))
    with pytest.raises(ConfigError):
        list(batch_iter(ds, 5, 0, 0))
    empty = gen_dataset(DatasetSpec(num_classes=2, samples_per_class=0))
    with pytest.raises(ConfigError):
        list(dual_batch_iter(ds, empty, 1, 0, 0))


def test_sampler_deterministic():
    src = gen_dataset(DatasetSpec(num_classes=3, samples_per_class=7))
    tar = gen_dataset(DatasetSpec(num_classes=2, samples_per_class=5, domain="target"))
    a = [(s.indices.tolist(), t.indices.tolist()) for s, t in dual_batch_iter(src, tar, 3, 4, 2)]
    b = [(s.indices.tolist(), t.indices.tolist()) for s, t in dual_batch_iter(src, tar, 3, 4, 2)]
    assert a == b


@pytest.mark.parametrize("spec", [SMALL, DatasetSpec(mode="gauss", num_classes=3, samples_per_class=4, dim=4, domain="target2")])
def test_file_round_trip(tmp_path, spec):
    ds = gen_dataset(spec)
    path = tmp_path / "d.sftd"
    write_dataset(ds, path)
    back = read_dataset(path)
    assert back.spec == ds.spec
    assert same(back, ds)
    assert back.label_map == ds.label_map


def test_empty_file_round_trip(tmp_path):
    ds = gen_dataset(DatasetSpec(num_classes=2, samples_per_class=0))
    write_dataset(ds, tmp_path / "e.sftd")
    assert len(read_dataset(tmp_path / "e.sftd")) == 0


def test_subsampled_round_trip(tmp_path):
    ds = subsample_categories(gen_dataset(DatasetSpec(num_classes=6, samples_per_class=2)), 0.5, 3)
    write_dataset(ds, tmp_path / "s.sftd")
    back = read_dataset(tmp_path / "s.sftd")
    assert same(back, ds) and back.label_map == ds.label_map


def test_file_size_formula(tmp_path):
    ds = gen_dataset(SMALL)
    path = tmp_path / "d.sftd"
    write_dataset(ds, path)
    # magic, spec block (u8 u8 4xu32 8xf64 u64), label map, sample dims, count, then per-sample records
    header = 8 + (1 + 1 + 4 * 4 + 8 * 8 + 8) + (4 + 4 * 4) + (4 + 3 * 4) + 8
    per_sample = 4 + 1 + 5 * 8 + 256 * 8
    assert path.stat().st_size == header + len(ds) * per_sample == dataset_file_size(ds)


def test_bad_magic(tmp_path):
    path = tmp_path / "d.sftd"
    write_dataset(gen_dataset(SMALL), path)
    path.write_bytes(b"NOTDATA!" + path.read_bytes()[8:])
    with pytest.raises(FormatError):
        read_dataset(path)
