import struct

import numpy as np
import pytest

from cores import (
    FormatError,
    InsufficientDataError,
    InvalidParameterError,
    LabeledSet,
    Method,
    TimelineMode,
    build_timeline,
    classes_disjoint,
    gen_blobs,
    load_idx,
    make_verification_pairs,
    pair_space_sizes,
    split_eval_classes,
)


def test_gen_blobs_shapes_and_determinism():
    a = gen_blobs(4, 25, 6, 0.3, seed=7)
    b = gen_blobs(4, 25, 6, 0.3, seed=7)
    c = gen_blobs(4, 25, 6, 0.3, seed=8)
    assert a.samples.shape == (100, 6)
    assert np.array_equal(a.labels, np.repeat(np.arange(4), 25))
    assert np.array_equal(a.samples, b.samples)
    assert not np.array_equal(a.samples, c.samples)


def test_gen_blobs_class_means_near_unit_sphere():
    data = gen_blobs(8, 400, 16, 0.05, seed=1)
    for c in range(8):
        mean = data.samples[data.labels == c].mean(axis=0)
        assert abs(np.linalg.norm(mean) - 1.0) < 0.02


def test_gen_blobs_rejects_bad_parameters():
    for args in [(1, 5, 3, 0.1, 0), (3, 0, 3, 0.1, 0), (3, 5, 0, 0.1, 0),
                 (3, 5, 3, 0.0, 0), (3, 5, 3, 0.1, -1)]:
        with pytest.raises(InvalidParameterError):
            gen_blobs(*args)


def test_labeled_set_is_immutable_and_tracks_classes():
    ls = LabeledSet(np.zeros((4, 2)), np.array([5, 3, 5, 9]))
    assert ls.class_ids.tolist() == [5, 3, 9]  # first-appearance order
    assert ls.num_classes == 3
    with pytest.raises(ValueError):
        ls.samples[0, 0] = 1.0
    with pytest.raises(ValueError):
        ls.labels[0] = 0


def test_take_tracks_source_rows_through_nesting():
    ls = LabeledSet(np.arange(12, dtype=float).reshape(6, 2),
                    np.array([0, 0, 1, 1, 2, 2]))
    sub = ls.take(np.array([4, 1, 3]))
    assert sub.source_rows.tolist() == [4, 1, 3]
    subsub = sub.take(np.array([2, 0]))
    assert subsub.source_rows.tolist() == [3, 4]  # back to the original rows
    assert np.array_equal(subsub.samples, ls.samples[[3, 4]])


def write_idx(tmp_path, pixels, labels, image_magic=0x803, label_magic=0x801):
    count, rows, cols = pixels.shape
    ipath = tmp_path / "im.idx"
    lpath = tmp_path / "lb.idx"
    ipath.write_bytes(struct.pack(">IIII", image_magic, count, rows, cols)
                      + pixels.astype(np.uint8).tobytes())
    lpath.write_bytes(struct.pack(">II", label_magic, len(labels))
                      + bytes(labels))
    return ipath, lpath


def test_load_idx_roundtrip(tmp_path):
    pixels = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3)
    ipath, lpath = write_idx(tmp_path, pixels, [7, 1])
    ds = load_idx(ipath, lpath)
    assert ds.samples.shape == (2, 9)
    assert ds.labels.tolist() == [7, 1]
    assert abs(ds.samples[1, 0] - 9 / 255.0) < 1e-12
    assert ds.samples.max() <= 1.0


def test_load_idx_bad_magic_and_truncation(tmp_path):
    pixels = np.zeros((1, 2, 2), dtype=np.uint8)
    ipath, lpath = write_idx(tmp_path, pixels, [0], image_magic=0x804)
    with pytest.raises(FormatError, match="bad magic"):
        load_idx(ipath, lpath)

    ipath, lpath = write_idx(tmp_path, pixels, [0], label_magic=0x803)
    with pytest.raises(FormatError, match="bad magic"):
        load_idx(ipath, lpath)

    ipath, lpath = write_idx(tmp_path, pixels, [0])
    ipath.write_bytes(ipath.read_bytes()[:-1])
    with pytest.raises(FormatError, match="expected"):
        load_idx(ipath, lpath)

    ipath, lpath = write_idx(tmp_path, pixels, [0, 1])
    with pytest.raises(FormatError, match="does not match"):
        load_idx(ipath, lpath)


def blob_set():
    return gen_blobs(6, 20, 4, 0.2, seed=3)


def test_timeline_steps_are_nested_and_growing():
    for mode in TimelineMode:
        timeline = build_timeline(blob_set(), fractions=(0.4, 0.7, 1.0),
                                  mode=mode, seed=5)
        assert timeline.num_steps == 3
        sizes = [s.num_samples for s in timeline.steps]
        assert sizes[0] < sizes[1] < sizes[2]
        assert sizes[-1] == 120
        for small, big in zip(timeline.steps, timeline.steps[1:]):
            assert set(small.source_rows.tolist()) <= set(big.source_rows.tolist())


def test_timeline_by_class_grows_classes_only():
    timeline = build_timeline(blob_set(), fractions=(0.5, 1.0),
                              mode=TimelineMode.BY_CLASS, seed=5)
    first, last = timeline.steps
    assert first.num_classes == 3
    assert last.num_classes == 6
    # every class already present has all of its samples from the start
    for c in first.class_ids:
        assert (first.labels == c).sum() == 20


def test_timeline_by_sample_keeps_all_classes():
    timeline = build_timeline(blob_set(), fractions=(0.5, 1.0),
                              mode=TimelineMode.BY_SAMPLE, seed=5)
    first, last = timeline.steps
    assert first.num_classes == 6
    assert last.num_classes == 6
    for c in first.class_ids:
        assert (first.labels == c).sum() == 10
        assert (last.labels == c).sum() == 20


def test_timeline_mixed_grows_both_axes():
    timeline = build_timeline(blob_set(), fractions=(0.5, 1.0),
                              mode=TimelineMode.MIXED, seed=5)
    first, last = timeline.steps
    assert first.num_classes == 3
    assert last.num_classes == 6
    for c in first.class_ids:
        assert (first.labels == c).sum() == 10


def test_timeline_class_order_is_seeded():
    t1 = build_timeline(blob_set(), fractions=(0.5, 1.0), seed=1)
    t2 = build_timeline(blob_set(), fractions=(0.5, 1.0), seed=1)
    t3 = build_timeline(blob_set(), fractions=(0.5, 1.0), seed=2)
    assert t1.steps[0].class_ids.tolist() == t2.steps[0].class_ids.tolist()
    assert t1.steps[0].class_ids.tolist() != t3.steps[0].class_ids.tolist()


def test_timeline_rejects_bad_fractions():
    for fracs in [(), (0.5,), (0.5, 0.9), (0.9, 0.5, 1.0), (0.5, 0.5, 1.0),
                  (0.0, 1.0), (0.5, 1.2)]:
        with pytest.raises(InvalidParameterError):
            build_timeline(blob_set(), fractions=fracs)


def test_timeline_rejects_no_growth_steps():
    tiny = LabeledSet(np.zeros((4, 2)), np.array([0, 0, 1, 1]))
    with pytest.raises(InvalidParameterError, match="adds no data"):
        build_timeline(tiny, fractions=(0.5, 0.6, 1.0),
                       mode=TimelineMode.BY_SAMPLE)


def test_pair_space_sizes_brute_force():
    labels = np.array([0, 0, 0, 1, 1, 2])
    pos, neg = pair_space_sizes(labels)
    # unordered same-set pairs counted as ordered u != v
    assert pos == 3 * 2 + 2 * 1
    assert neg == 6 * 5 - pos
    gpos, gneg = pair_space_sizes(labels, np.array([0, 1, 3]))
    assert gpos == 3 * 1 + 2 * 1
    assert gneg == 6 * 3 - gpos


def test_make_verification_pairs_counts_and_correctness():
    labels = np.repeat(np.arange(4), 5)
    pairs = make_verification_pairs(labels, 30, 40, seed=2)
    assert pairs.num_positive == 30
    assert pairs.num_negative == 40
    same = labels[pairs.query_index] == labels[pairs.gallery_index]
    assert np.array_equal(same, pairs.is_positive)
    # same-set mode never pairs a row with itself
    assert np.all(pairs.query_index != pairs.gallery_index)
    # no pair repeats
    seen = set(zip(pairs.query_index.tolist(), pairs.gallery_index.tolist()))
    assert len(seen) == pairs.num_pairs


def test_make_verification_pairs_two_set_mode():
    q = np.array([0, 0, 1, 2])
    g = np.array([0, 1, 1, 1, 3])
    pairs = make_verification_pairs(q, 4, 10, seed=0, gallery_labels=g)
    same = q[pairs.query_index] == g[pairs.gallery_index]
    assert np.array_equal(same, pairs.is_positive)


def test_make_verification_pairs_deterministic():
    labels = np.repeat(np.arange(3), 8)
    p1 = make_verification_pairs(labels, 20, 20, seed=9)
    p2 = make_verification_pairs(labels, 20, 20, seed=9)
    p3 = make_verification_pairs(labels, 20, 20, seed=10)
    assert np.array_equal(p1.query_index, p2.query_index)
    assert np.array_equal(p1.gallery_index, p2.gallery_index)
    assert not np.array_equal(p1.query_index, p3.query_index)


def test_make_verification_pairs_exhausts_exactly():
    labels = np.array([0, 0, 1])
    # exactly 2 ordered positive pairs and 4 negative ones exist
    pairs = make_verification_pairs(labels, 2, 4, seed=0)
    assert pairs.num_pairs == 6
    with pytest.raises(InsufficientDataError):
        make_verification_pairs(labels, 3, 4, seed=0)
    with pytest.raises(InsufficientDataError):
        make_verification_pairs(labels, 2, 5, seed=0)


def test_split_eval_classes_disjoint_and_seeded():
    data = gen_blobs(8, 10, 4, 0.2, seed=0)
    train, evaluation = split_eval_classes(data, 3, seed=4)
    assert classes_disjoint(train, evaluation)
    assert train.num_classes == 5
    assert evaluation.num_classes == 3
    assert train.num_samples + evaluation.num_samples == data.num_samples
    again_train, again_eval = split_eval_classes(data, 3, seed=4)
    assert again_eval.class_ids.tolist() == evaluation.class_ids.tolist()
    with pytest.raises(InvalidParameterError):
        split_eval_classes(data, 7, seed=0)  # would leave < 2 training classes
