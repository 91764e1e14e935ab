"""Datasets, sequential training-set timelines, and verification pairs."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import (
    FormatError,
    InsufficientDataError,
    InvalidParameterError,
)
from .netcore import TrainConfig


def _first_appearance_unique(labels: np.ndarray) -> np.ndarray:
    _, first = np.unique(labels, return_index=True)
    return labels[np.sort(first)]


@dataclass(frozen=True)
class LabeledSet:
    """Immutable bundle of samples, integer labels, and the classes present.

    ``class_ids`` lists distinct classes in order of first appearance, which
    downstream code uses as the class-to-output allocation order.
    ``source_rows``, when present, maps each row back to the set this one was
    sliced from; timelines use it to tell old samples from new ones.
    """

    samples: np.ndarray
    labels: np.ndarray
    source_rows: np.ndarray | None = None

    def __post_init__(self):
        x = np.ascontiguousarray(np.asarray(self.samples, dtype=np.float64))
        y = np.ascontiguousarray(np.asarray(self.labels, dtype=np.int64))
        if x.ndim != 2:
            raise InvalidParameterError(f"samples must be 2-D, got shape {x.shape}")
        if y.ndim != 1 or y.shape[0] != x.shape[0]:
            raise InvalidParameterError(
                f"labels shape {y.shape} does not match {x.shape[0]} samples"
            )
        if x.shape[0] < 1:
            raise InvalidParameterError("a labeled set needs at least one sample")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "labels", y)
        if self.source_rows is not None:
            rows = np.ascontiguousarray(np.asarray(self.source_rows, dtype=np.int64))
            if rows.shape != (x.shape[0],):
                raise InvalidParameterError("source_rows must align with samples")
            rows.setflags(write=False)
            object.__setattr__(self, "source_rows", rows)

    @property
    def num_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def input_dim(self) -> int:
        return self.samples.shape[1]

    @property
    def class_ids(self) -> np.ndarray:
        return _first_appearance_unique(self.labels)

    @property
    def num_classes(self) -> int:
        return self.class_ids.size

    def take(self, rows: np.ndarray) -> "LabeledSet":
        """Row subset; remembers where each row came from."""
        rows = np.asarray(rows, dtype=np.int64)
        parent = self.source_rows[rows] if self.source_rows is not None else rows
        return LabeledSet(self.samples[rows], self.labels[rows], source_rows=parent)


def gen_blobs(num_classes: int, samples_per_class: int, input_dim: int,
              spread: float, seed: int) -> LabeledSet:
    """Gaussian blobs around class means drawn uniformly on the unit sphere.

    ``spread`` is the isotropic noise standard deviation and must be positive;
    zero would make every sample identical to its class mean and degenerate
    distance-based evaluation.
    """
    if num_classes < 2:
        raise InvalidParameterError(f"need >= 2 classes, got {num_classes}")
    if samples_per_class < 1:
        raise InvalidParameterError(f"need >= 1 sample per class, got {samples_per_class}")
    if input_dim < 1:
        raise InvalidParameterError(f"input_dim must be >= 1, got {input_dim}")
    if not spread > 0:
        raise InvalidParameterError(f"spread must be > 0, got {spread}")
    if seed < 0:
        raise InvalidParameterError(f"seed must be >= 0, got {seed}")
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    means = rng.normal(size=(num_classes, input_dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    noise = rng.normal(scale=spread, size=(num_classes * samples_per_class, input_dim))
    samples = np.repeat(means, samples_per_class, axis=0) + noise
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), samples_per_class)
    return LabeledSet(samples, labels)


IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


def _read_exact(data: bytes, fmt: str, offset: int, path: Path):
    size = struct.calcsize(fmt)
    if len(data) < offset + size:
        raise FormatError(
            f"{path}: truncated, need {size} bytes at offset {offset}, "
            f"file has {len(data)}"
        )
    return struct.unpack_from(fmt, data, offset)


def load_idx(images_path, labels_path) -> LabeledSet:
    """Load an IDX image/label file pair (big-endian, unsigned byte pixels).

    Pixels are scaled to [0, 1] and flattened row-major to one vector per
    image. Malformed files fail with the byte offset of the problem.
    """
    ipath, lpath = Path(images_path), Path(labels_path)
    idata = ipath.read_bytes()
    (imagic,) = _read_exact(idata, ">I", 0, ipath)
    if imagic != IDX_IMAGE_MAGIC:
        raise FormatError(
            f"{ipath}: bad magic 0x{imagic:08x} at byte 0, expected 0x{IDX_IMAGE_MAGIC:08x}"
        )
    count, rows, cols = _read_exact(idata, ">III", 4, ipath)
    pixel_bytes = count * rows * cols
    if len(idata) != 16 + pixel_bytes:
        raise FormatError(
            f"{ipath}: expected {16 + pixel_bytes} bytes for {count} images of "
            f"{rows}x{cols}, file has {len(idata)} (pixel data starts at byte 16)"
        )

    ldata = lpath.read_bytes()
    (lmagic,) = _read_exact(ldata, ">I", 0, lpath)
    if lmagic != IDX_LABEL_MAGIC:
        raise FormatError(
            f"{lpath}: bad magic 0x{lmagic:08x} at byte 0, expected 0x{IDX_LABEL_MAGIC:08x}"
        )
    (lcount,) = _read_exact(ldata, ">I", 4, lpath)
    if len(ldata) != 8 + lcount:
        raise FormatError(
            f"{lpath}: expected {8 + lcount} bytes for {lcount} labels, "
            f"file has {len(ldata)} (label data starts at byte 8)"
        )
    if lcount != count:
        raise FormatError(
            f"label count {lcount} in {lpath} does not match image count {count} in {ipath}"
        )

    pixels = np.frombuffer(idata, dtype=np.uint8, offset=16)
    samples = pixels.astype(np.float64).reshape(count, rows * cols) / 255.0
    labels = np.frombuffer(ldata, dtype=np.uint8, offset=8).astype(np.int64)
    return LabeledSet(samples, labels)


class Method(str, Enum):
    """Training method used along an upgrade timeline."""

    CORES = "cores"
    ITM = "itm"
    IFT = "ift"
    L2 = "l2"


class TimelineMode(str, Enum):
    """How each step's subset grows toward the full set."""

    BY_CLASS = "by-class"
    BY_SAMPLE = "by-sample"
    MIXED = "mixed"


@dataclass(frozen=True)
class UpgradeTimeline:
    """A nested sequence of training sets plus how each step is trained."""

    steps: tuple
    configs: tuple
    method: Method

    def __post_init__(self):
        steps = tuple(self.steps)
        configs = tuple(self.configs)
        if len(steps) < 1:
            raise InvalidParameterError("a timeline needs at least one step")
        if len(configs) != len(steps):
            raise InvalidParameterError(
                f"{len(configs)} configs for {len(steps)} steps"
            )
        object.__setattr__(self, "steps", steps)
        object.__setattr__(self, "configs", configs)
        object.__setattr__(self, "method", Method(self.method))

    @property
    def num_steps(self) -> int:
        return len(self.steps)


def _step_counts(fractions, total: int, label: str) -> list:
    # Floor the fraction, keep at least 1, and force the last step to cover
    # everything; the remainder therefore lands in the final step.
    counts = [max(1, int(np.floor(f * total))) for f in fractions]
    counts[-1] = total
    for a, b in zip(counts, counts[1:]):
        if b < a:
            raise InvalidParameterError(
                f"fractions produce shrinking {label} counts {counts}"
            )
    return counts


def build_timeline(
    labeled_set: LabeledSet,
    fractions,
    mode: TimelineMode = TimelineMode.BY_CLASS,
    seed: int = 0,
    config: TrainConfig | None = None,
    method: Method = Method.CORES,
) -> UpgradeTimeline:
    """Split a set into nested training steps T_1 subset ... subset T_n.

    Fractions must be strictly increasing and end at exactly 1.0. The class
    order is a seeded permutation, so different seeds grow the timeline along
    different class sequences; per-class sample order is also seeded so
    by-sample prefixes are reproducible. Every step strictly extends the
    previous one.
    """
    fracs = [float(f) for f in fractions]
    if not fracs:
        raise InvalidParameterError("fractions must be non-empty")
    if any(not 0.0 < f <= 1.0 for f in fracs):
        raise InvalidParameterError(f"fractions must lie in (0, 1], got {fracs}")
    if any(b <= a for a, b in zip(fracs, fracs[1:])):
        raise InvalidParameterError(f"fractions must be strictly increasing, got {fracs}")
    if abs(fracs[-1] - 1.0) > 1e-12:
        raise InvalidParameterError(f"final fraction must be 1.0, got {fracs[-1]}")
    fracs[-1] = 1.0
    if seed < 0:
        raise InvalidParameterError(f"seed must be >= 0, got {seed}")
    mode = TimelineMode(mode)

    class_ids = labeled_set.class_ids
    order_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0]))
    class_order = class_ids[order_rng.permutation(class_ids.size)]
    row_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))
    class_rows = {}
    for c in class_order:
        rows = np.flatnonzero(labeled_set.labels == c)
        class_rows[int(c)] = rows[row_rng.permutation(rows.size)]

    n_steps = len(fracs)
    if mode is TimelineMode.BY_SAMPLE:
        class_counts = [class_ids.size] * n_steps
    else:
        class_counts = _step_counts(fracs, class_ids.size, "class")
    if mode is TimelineMode.BY_CLASS:
        sample_counts = {int(c): [rows.size] * n_steps for c, rows in class_rows.items()}
    else:
        sample_counts = {
            int(c): _step_counts(fracs, rows.size, "sample")
            for c, rows in class_rows.items()
        }

    steps = []
    previous_size = 0
    for t in range(n_steps):
        parts = [
            class_rows[int(c)][: sample_counts[int(c)][t]]
            for c in class_order[: class_counts[t]]
        ]
        rows = np.concatenate(parts)
        if rows.size <= previous_size:
            raise InvalidParameterError(
                f"step {t + 1} adds no data (fractions too close for this set size)"
            )
        previous_size = rows.size
        steps.append(labeled_set.take(rows))

    cfg = config if config is not None else TrainConfig()
    return UpgradeTimeline(steps=tuple(steps), configs=(cfg,) * n_steps, method=method)


@dataclass(frozen=True)
class VerificationPairs:
    """Index pairs for verification: query row u against gallery row v."""

    query_index: np.ndarray
    gallery_index: np.ndarray
    is_positive: np.ndarray

    def __post_init__(self):
        u = np.ascontiguousarray(np.asarray(self.query_index, dtype=np.int64))
        v = np.ascontiguousarray(np.asarray(self.gallery_index, dtype=np.int64))
        p = np.ascontiguousarray(np.asarray(self.is_positive, dtype=bool))
        if not (u.shape == v.shape == p.shape) or u.ndim != 1 or u.size < 1:
            raise InvalidParameterError("pair arrays must be equal-length, non-empty 1-D")
        for arr, name in ((u, "query_index"), (v, "gallery_index"), (p, "is_positive")):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def num_pairs(self) -> int:
        return self.query_index.size

    @property
    def num_positive(self) -> int:
        return int(self.is_positive.sum())

    @property
    def num_negative(self) -> int:
        return int((~self.is_positive).sum())


_ENUMERATION_LIMIT = 1 << 22


def _sample_flat(rng: np.random.Generator, space: int, k: int) -> np.ndarray:
    if space <= _ENUMERATION_LIMIT:
        return rng.choice(space, size=k, replace=False)
    # Space too large to materialise: rejection-sample distinct positions.
    seen = set()
    out = np.empty(k, dtype=np.int64)
    filled = 0
    while filled < k:
        for pos in rng.integers(0, space, size=2 * (k - filled)):
            if pos not in seen:
                seen.add(int(pos))
                out[filled] = pos
                filled += 1
                if filled == k:
                    break
    return out


def _positive_space(q_by_class: dict, g_by_class: dict, same_set: bool):
    sizes = []
    classes = []
    for c, qrows in q_by_class.items():
        grows = g_by_class.get(c)
        if grows is None:
            continue
        n = qrows.size * (grows.size - 1) if same_set else qrows.size * grows.size
        if n > 0:
            classes.append(c)
            sizes.append(n)
    return classes, np.asarray(sizes, dtype=np.int64)


def _labels_by_class(labels: np.ndarray) -> dict:
    return {int(c): np.flatnonzero(labels == c) for c in np.unique(labels)}


def pair_space_sizes(q_labels, gallery_labels=None):
    """Count the distinct same-class and cross-class (u, v) pairs available.

    Single-array mode counts ordered pairs with u != v over one set; with
    ``gallery_labels`` the pairs run from the first label array into the
    second.
    """
    q = np.asarray(getattr(q_labels, "labels", q_labels), dtype=np.int64)
    same_set = gallery_labels is None
    g = q if same_set else np.asarray(gallery_labels, dtype=np.int64)
    q_by = _labels_by_class(q)
    g_by = q_by if same_set else _labels_by_class(g)
    _, pos_sizes = _positive_space(q_by, g_by, same_set)
    total_pos = int(pos_sizes.sum()) if pos_sizes.size else 0
    # Negatives are the different-class cells of the (u, v) grid; in
    # single-set mode the diagonal is same-class, so it drops out here too.
    common = set(q_by) & set(g_by)
    same_class_grid = sum(q_by[c].size * g_by[c].size for c in common)
    total_neg = int(q.size) * int(g.size) - same_class_grid
    return total_pos, total_neg


def sample_pair_arrays(q_labels, gallery_labels, n_pos: int, n_neg: int,
                       rng: np.random.Generator):
    """Draw pair index arrays without replacement at the pair level.

    Counts must already be feasible (see :func:`pair_space_sizes`); zero
    counts yield empty arrays. Returns (pos_u, pos_v, neg_u, neg_v).
    """
    q = np.asarray(getattr(q_labels, "labels", q_labels), dtype=np.int64)
    same_set = gallery_labels is None
    g = q if same_set else np.asarray(gallery_labels, dtype=np.int64)
    q_by = _labels_by_class(q)
    g_by = q_by if same_set else _labels_by_class(g)
    pos_classes, pos_sizes = _positive_space(q_by, g_by, same_set)
    total_pos = int(pos_sizes.sum()) if pos_sizes.size else 0

    # Positives: flatten the per-class (u, v) grids into one index space.
    pos_u = np.empty(n_pos, dtype=np.int64)
    pos_v = np.empty(n_pos, dtype=np.int64)
    if n_pos:
        offsets = np.concatenate([[0], np.cumsum(pos_sizes)])
        flat = np.sort(_sample_flat(rng, total_pos, n_pos))
        cls_idx = np.searchsorted(offsets, flat, side="right") - 1
        for i, (ci, f) in enumerate(zip(cls_idx, flat)):
            c = pos_classes[ci]
            r = int(f - offsets[ci])
            qrows, grows = q_by[c], g_by[c]
            if same_set:
                ui, vi = divmod(r, grows.size - 1)
                if vi >= ui:
                    vi += 1
            else:
                ui, vi = divmod(r, grows.size)
            pos_u[i] = qrows[ui]
            pos_v[i] = grows[vi]

    # Negatives: rejection-sample the full grid, dropping same-class cells,
    # the diagonal (single-set mode), and duplicates.
    neg_u = np.empty(n_neg, dtype=np.int64)
    neg_v = np.empty(n_neg, dtype=np.int64)
    seen = set()
    filled = 0
    while filled < n_neg:
        batch = max(64, 2 * (n_neg - filled))
        us = rng.integers(0, q.size, size=batch)
        vs = rng.integers(0, g.size, size=batch)
        for u, v in zip(us, vs):
            if q[u] == g[v]:
                continue
            key = (int(u), int(v))
            if key in seen:
                continue
            seen.add(key)
            neg_u[filled] = u
            neg_v[filled] = v
            filled += 1
            if filled == n_neg:
                break
    return pos_u, pos_v, neg_u, neg_v


def make_verification_pairs(
    eval_set,
    n_pos: int,
    n_neg: int,
    seed: int,
    gallery_labels=None,
) -> VerificationPairs:
    """Sample labeled pairs without replacement at the pair level.

    With only ``eval_set`` (a LabeledSet or a plain label array) both pair
    members index the same set and u != v. Passing ``gallery_labels`` switches
    to two-set mode: u indexes the first label array, v the second, which is
    how query/gallery splits build their pairs. Requests beyond the number of
    distinct pairs available fail rather than silently repeat.
    """
    if n_pos < 1 or n_neg < 1:
        raise InvalidParameterError(f"need n_pos >= 1 and n_neg >= 1, got {n_pos}, {n_neg}")
    if seed < 0:
        raise InvalidParameterError(f"seed must be >= 0, got {seed}")
    total_pos, total_neg = pair_space_sizes(eval_set, gallery_labels)
    if n_pos > total_pos:
        raise InsufficientDataError(
            f"requested {n_pos} same-class pairs but only {total_pos} exist"
        )
    if n_neg > total_neg:
        raise InsufficientDataError(
            f"requested {n_neg} cross-class pairs but only {total_neg} exist"
        )
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 2]))
    pos_u, pos_v, neg_u, neg_v = sample_pair_arrays(
        eval_set, gallery_labels, n_pos, n_neg, rng
    )
    return VerificationPairs(
        query_index=np.concatenate([pos_u, neg_u]),
        gallery_index=np.concatenate([pos_v, neg_v]),
        is_positive=np.concatenate([
            np.ones(n_pos, dtype=bool),
            np.zeros(n_neg, dtype=bool),
        ]),
    )


def split_eval_classes(labeled_set: LabeledSet, num_eval_classes: int, seed: int):
    """Hold out whole classes for open-set evaluation.

    Returns (train_set, eval_set) with disjoint class sets; the held-out
    classes are a seeded draw from the classes present.
    """
    classes = labeled_set.class_ids
    if not 1 <= num_eval_classes <= classes.size - 2:
        raise InvalidParameterError(
            f"num_eval_classes must lie in [1, {classes.size - 2}] so >= 2 "
            f"training classes remain, got {num_eval_classes}"
        )
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 3]))
    eval_classes = set(
        int(c) for c in rng.choice(classes, size=num_eval_classes, replace=False)
    )
    eval_mask = np.isin(labeled_set.labels, list(eval_classes))
    train = labeled_set.take(np.flatnonzero(~eval_mask))
    evaluation = labeled_set.take(np.flatnonzero(eval_mask))
    return train, evaluation


def classes_disjoint(a: LabeledSet, b: LabeledSet) -> bool:
    return not set(a.class_ids.tolist()) & set(b.class_ids.tolist())
