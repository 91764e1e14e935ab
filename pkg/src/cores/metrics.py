"""Compatibility metrics between feature extractors.

Everything here works on stored feature galleries: a model is never invoked
at evaluation time. The central objects are the lower-triangular
compatibility matrix (query model i against gallery model j for i >= j), the
pairwise criterion check between an upgraded and an old extractor, and the
scalar summaries derived from the matrix.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import VerificationPairs, pair_space_sizes, sample_pair_arrays
from .errors import (
    InvalidParameterError,
    MissingArtifactError,
    UndefinedDistanceError,
    UndefinedGainError,
    UndefinedMetricError,
)
from .gallery import FeatureGallery, read_gallery, read_manifest, verify_digest

METRIC_VERIFICATION = "verification"
METRIC_MAP = "map"
METRICS = (METRIC_VERIFICATION, METRIC_MAP)


def _as_float_rows(arr, name: str) -> np.ndarray:
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim != 2:
        raise InvalidParameterError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def _safe_norms(a: np.ndarray, name: str) -> np.ndarray:
    norms = np.linalg.norm(a, axis=1)
    if np.any(norms == 0.0):
        row = int(np.flatnonzero(norms == 0.0)[0])
        raise UndefinedDistanceError(
            f"{name} row {row} has zero norm; cosine distance is undefined"
        )
    return norms


def cosine_distance(a, b) -> float:
    """1 - cos(angle) between two vectors; zero-norm input is an error."""
    av = np.asarray(a, dtype=np.float64).ravel()
    bv = np.asarray(b, dtype=np.float64).ravel()
    if av.shape != bv.shape:
        raise InvalidParameterError(f"vector shapes {av.shape} and {bv.shape} differ")
    na, nb = np.linalg.norm(av), np.linalg.norm(bv)
    if na == 0.0 or nb == 0.0:
        raise UndefinedDistanceError("cosine distance undefined for zero-norm vectors")
    return float(1.0 - av.dot(bv) / (na * nb))


def cosine_distance_matrix(a, b) -> np.ndarray:
    """All-pairs cosine distances, shape (len(a), len(b))."""
    am = _as_float_rows(a, "first argument")
    bm = _as_float_rows(b, "second argument")
    if am.shape[1] != bm.shape[1]:
        raise InvalidParameterError(
            f"dimension mismatch: {am.shape[1]} vs {bm.shape[1]}"
        )
    an = _safe_norms(am, "first argument")
    bn = _safe_norms(bm, "second argument")
    return 1.0 - (am / an[:, None]) @ (bm / bn[:, None]).T


def _pair_cosine_distances(pairs: VerificationPairs, query: FeatureGallery,
                           gallery: FeatureGallery) -> np.ndarray:
    if query.dim != gallery.dim:
        raise InvalidParameterError(
            f"gallery dims differ: query {query.dim} vs gallery {gallery.dim}"
        )
    if pairs.query_index.max() >= query.num_rows:
        raise InvalidParameterError(
            f"pair index {int(pairs.query_index.max())} outside query gallery "
            f"of {query.num_rows} rows"
        )
    if pairs.gallery_index.max() >= gallery.num_rows:
        raise InvalidParameterError(
            f"pair index {int(pairs.gallery_index.max())} outside gallery "
            f"of {gallery.num_rows} rows"
        )
    qa = query.features[pairs.query_index].astype(np.float64)
    gb = gallery.features[pairs.gallery_index].astype(np.float64)
    qn = _safe_norms(qa, "query features")
    gn = _safe_norms(gb, "gallery features")
    return 1.0 - np.einsum("ij,ij->i", qa, gb) / (qn * gn)


def best_threshold_accuracy(distances, is_positive):
    """Best achievable accuracy for a rule ``positive iff distance < t``.

    Candidate thresholds sit at midpoints between consecutive distinct sorted
    distances, plus sentinels below and above everything; among equally good
    thresholds the lowest wins. Returns (accuracy, threshold).
    """
    d = np.asarray(distances, dtype=np.float64).ravel()
    pos = np.asarray(is_positive, dtype=bool).ravel()
    if d.shape != pos.shape or d.size < 1:
        raise InvalidParameterError("distances and labels must be equal-length and non-empty")
    n = d.size
    order = np.argsort(d, kind="stable")
    ds = d[order]
    cum_pos = np.concatenate([[0], np.cumsum(pos[order].astype(np.int64))])
    total_pos = int(cum_pos[-1])

    # A cut after position c predicts the first c pairs positive; only cuts
    # at boundaries between distinct values are realisable thresholds.
    boundary = np.flatnonzero(ds[1:] != ds[:-1]) + 1
    cuts = np.concatenate([[0], boundary, [n]])
    correct = cum_pos[cuts] + ((n - cuts) - (total_pos - cum_pos[cuts]))
    best = int(np.argmax(correct))
    cut = int(cuts[best])
    if cut == 0:
        threshold = float(ds[0] - 1.0)
    elif cut == n:
        threshold = float(ds[-1] + 1.0)
    else:
        threshold = float((ds[cut - 1] + ds[cut]) / 2.0)
    return float(correct[best]) / n, threshold


def verification_accuracy(pairs: VerificationPairs, query: FeatureGallery,
                          gallery: FeatureGallery) -> float:
    """Pair-verification accuracy at the best cosine-distance threshold.

    Scale-invariant per feature row, since only angles enter the distances.
    """
    distances = _pair_cosine_distances(pairs, query, gallery)
    accuracy, _ = best_threshold_accuracy(distances, pairs.is_positive)
    return accuracy


def average_precision(relevant_in_rank_order) -> float:
    """AP of one ranked result list given per-rank relevance booleans."""
    rel = np.asarray(relevant_in_rank_order, dtype=bool).ravel()
    hits = np.flatnonzero(rel)
    if hits.size == 0:
        raise UndefinedMetricError("no relevant item in the ranking")
    precision_at_hit = (np.arange(hits.size) + 1.0) / (hits + 1.0)
    return float(precision_at_hit.mean())


def retrieval_map_detailed(query: FeatureGallery, gallery: FeatureGallery):
    """Per-query average precisions plus the count of excluded queries.

    Rankings sort by ascending cosine distance; ties keep gallery row order.
    A query whose class never appears in the gallery cannot be scored and is
    excluded.
    """
    dist = cosine_distance_matrix(query.features, gallery.features)
    aps = []
    excluded = 0
    for i in range(query.num_rows):
        order = np.argsort(dist[i], kind="stable")
        rel = gallery.labels[order] == query.labels[i]
        if not rel.any():
            excluded += 1
            continue
        aps.append(average_precision(rel))
    return aps, excluded


def retrieval_map(query: FeatureGallery, gallery: FeatureGallery) -> float:
    """Mean average precision of querying ``gallery`` with ``query`` rows."""
    aps, excluded = retrieval_map_detailed(query, gallery)
    if excluded:
        warnings.warn(
            f"{excluded} of {query.num_rows} queries have no same-class gallery "
            "row and were excluded from the mean",
            RuntimeWarning,
            stacklevel=2,
        )
    if not aps:
        raise UndefinedMetricError("every query class is absent from the gallery")
    return float(np.mean(aps))


def _check_unit_interval(value: float, name: str) -> float:
    v = float(value)
    if not 0.0 <= v <= 1.0:
        raise InvalidParameterError(f"{name} must lie in [0, 1], got {v}")
    return v


def ecc_check(cross_test: float, self_test_old: float) -> bool:
    """Empirical compatibility: the cross-test must strictly beat the old
    model's self-test. Equality is not compatibility."""
    cross = _check_unit_interval(cross_test, "cross_test")
    old = _check_unit_interval(self_test_old, "self_test_old")
    return cross > old


def update_gain(cross_test: float, self_test_old: float,
                self_test_new_reindexed: float) -> float:
    """Fraction of the re-indexing headroom realised without re-indexing.

    gain = (cross - self_old) / (self_new_reindexed - self_old). The
    denominator is the improvement a full gallery re-index would deliver; if
    it is zero the ratio is undefined and an error is raised.
    """
    cross = _check_unit_interval(cross_test, "cross_test")
    old = _check_unit_interval(self_test_old, "self_test_old")
    new = _check_unit_interval(self_test_new_reindexed, "self_test_new_reindexed")
    if new == old:
        raise UndefinedGainError(
            f"re-indexed self-test equals the old self-test ({old}); gain undefined"
        )
    return (cross - old) / (new - old)


@dataclass(frozen=True)
class CompatibilityMatrix:
    """Lower-triangular matrix of metric values across upgrade steps.

    ``values[i, j]`` scores query features from step i+1 against gallery
    features from step j+1, defined for i >= j only; the strict upper
    triangle holds NaN. The diagonal holds each step's self-test.
    """

    values: np.ndarray
    metric: str

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).copy()
        if v.ndim != 2 or v.shape[0] != v.shape[1] or v.shape[0] < 1:
            raise InvalidParameterError(f"matrix must be square, got shape {v.shape}")
        iu = np.triu_indices(v.shape[0], k=1)
        v[iu] = np.nan
        low = np.tril_indices(v.shape[0])
        if np.any(np.isnan(v[low])):
            raise InvalidParameterError("lower triangle contains NaN")
        if np.any((v[low] < 0.0) | (v[low] > 1.0)):
            raise InvalidParameterError("metric values must lie in [0, 1]")
        if self.metric not in METRICS:
            raise InvalidParameterError(
                f"metric must be one of {METRICS}, got {self.metric!r}"
            )
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def num_steps(self) -> int:
        return self.values.shape[0]

    def entry(self, i: int, j: int) -> float:
        if not 0 <= j <= i < self.num_steps:
            raise InvalidParameterError(
                f"entry ({i}, {j}) outside the lower triangle of T={self.num_steps}"
            )
        return float(self.values[i, j])

    def lower_rows(self) -> list:
        """Row-major lower triangle: C11, C21, C22, C31, C32, C33, ..."""
        return [float(self.values[i, j])
                for i in range(self.num_steps) for j in range(i + 1)]

    @classmethod
    def from_lower_rows(cls, entries, metric: str) -> "CompatibilityMatrix":
        flat = [float(x) for x in entries]
        t = int((np.sqrt(8 * len(flat) + 1) - 1) / 2)
        if t * (t + 1) // 2 != len(flat):
            raise InvalidParameterError(
                f"{len(flat)} entries do not form a lower triangle"
            )
        values = np.full((t, t), np.nan)
        k = 0
        for i in range(t):
            for j in range(i + 1):
                values[i, j] = flat[k]
                k += 1
        return cls(values=values, metric=metric)


def avg_multi_compat(matrix: CompatibilityMatrix) -> float:
    """Fraction of cross-tests that strictly beat their gallery self-test.

    Defined over the T(T-1)/2 below-diagonal entries, so it needs at least
    one upgrade (T >= 2).
    """
    t = matrix.num_steps
    if t < 2:
        raise UndefinedMetricError(
            "compatibility across steps needs at least two steps"
        )
    wins = sum(
        1
        for i in range(1, t)
        for j in range(i)
        if matrix.values[i, j] > matrix.values[j, j]
    )
    return 2.0 * wins / (t * (t - 1))


def avg_multi_accuracy(matrix: CompatibilityMatrix) -> float:
    """Mean of all lower-triangle entries, self-tests included."""
    t = matrix.num_steps
    total = sum(matrix.values[i, j] for i in range(t) for j in range(i + 1))
    return 2.0 * total / (t * (t + 1))


@dataclass(frozen=True)
class CompatibilityReport:
    """Matrix plus derived flags and summary scalars.

    ``ecc_flags`` and ``gains`` run over cross entries (i > j) in row-major
    order: (2,1), (3,1), (3,2), (4,1), ... A gain is None where the step pair
    offers no headroom (C_ii == C_jj). ``ac`` is None for single-step runs.
    """

    matrix: CompatibilityMatrix
    ecc_flags: tuple
    gains: tuple
    ac: float | None
    am: float


def build_report(matrix: CompatibilityMatrix) -> CompatibilityReport:
    t = matrix.num_steps
    flags, gains = [], []
    for i in range(1, t):
        for j in range(i):
            cross = matrix.values[i, j]
            old = matrix.values[j, j]
            new = matrix.values[i, i]
            flags.append(bool(cross > old))
            gains.append(None if new == old else float((cross - old) / (new - old)))
    ac = avg_multi_compat(matrix) if t >= 2 else None
    return CompatibilityReport(
        matrix=matrix,
        ecc_flags=tuple(flags),
        gains=tuple(gains),
        ac=ac,
        am=avg_multi_accuracy(matrix),
    )


def report_to_json_dict(report: CompatibilityReport, run_manifest_digest: str) -> dict:
    return {
        "metric": report.matrix.metric,
        "T": report.matrix.num_steps,
        "matrix": report.matrix.lower_rows(),
        "ecc_flags": list(report.ecc_flags),
        "gains": list(report.gains),
        "ac": report.ac,
        "am": report.am,
        "run_manifest_digest": run_manifest_digest,
    }


def render_matrix_table(report: CompatibilityReport) -> str:
    """Aligned text rendering of the matrix and its summary lines."""
    t = report.matrix.num_steps
    width = 9
    lines = [f"compatibility matrix ({report.matrix.metric}), T={t}"]
    header = "      " + "".join(f"{('m' + str(j + 1)):>{width}}" for j in range(t))
    lines.append(header)
    for i in range(t):
        cells = "".join(f"{report.matrix.values[i, j]:>{width}.4f}" for j in range(i + 1))
        lines.append(f"{('m' + str(i + 1)):>6}" + cells)
    if t >= 2:
        lines.append("cross-tests against gallery self-tests:")
        k = 0
        for i in range(1, t):
            for j in range(i):
                cross = report.matrix.values[i, j]
                old = report.matrix.values[j, j]
                verdict = "pass" if report.ecc_flags[k] else "fail"
                gain = report.gains[k]
                gain_txt = "gain undefined" if gain is None else f"gain {100.0 * gain:.1f}%"
                lines.append(
                    f"  m{i + 1} vs m{j + 1}: {cross:.4f} > {old:.4f}  {verdict}  "
                    f"{gain_txt}  ({100.0 * (cross - old):+.2f} pp)"
                )
                k += 1
    ac_txt = "undefined" if report.ac is None else f"{report.ac:.6f}"
    lines.append(f"AC = {ac_txt}   AM = {report.am:.6f}")
    return "\n".join(lines) + "\n"


def build_compatibility_matrix(
    run_dir,
    metric: str = METRIC_VERIFICATION,
    pairs: VerificationPairs | None = None,
    verify: bool = True,
) -> CompatibilityMatrix:
    """Score every (query step i, gallery step j <= i) pair from stored files.

    Gallery features are read back from each step's files exactly as written;
    nothing is recomputed. With ``verify`` (the default), every artifact digest
    recorded in the run manifest is checked first and any mismatch aborts.
    The verification metric needs ``pairs`` indexing query/gallery rows.
    """
    if metric not in METRICS:
        raise InvalidParameterError(f"metric must be one of {METRICS}, got {metric!r}")
    if metric == METRIC_VERIFICATION and pairs is None:
        raise InvalidParameterError("the verification metric needs a pairs argument")
    run = Path(run_dir)
    manifest = read_manifest(run)
    steps = sorted(manifest["steps"], key=lambda s: s["step"])

    for entry in steps:
        for role in ("query_gallery", "gallery_gallery"):
            rel = entry[role]
            path = run / rel
            if not path.is_file():
                raise MissingArtifactError(
                    f"step {entry['step']}: gallery file missing: {path}"
                )
    if verify:
        for rel, digest in sorted(manifest["digests"].items()):
            path = run / rel
            if not path.is_file():
                raise MissingArtifactError(f"artifact listed in manifest missing: {path}")
            verify_digest(path, digest)

    queries = [read_gallery(run / s["query_gallery"], model_id=s["model_id"]) for s in steps]
    galleries = [read_gallery(run / s["gallery_gallery"], model_id=s["model_id"]) for s in steps]

    t = len(steps)
    values = np.full((t, t), np.nan)
    for i in range(t):
        for j in range(i + 1):
            if metric == METRIC_VERIFICATION:
                values[i, j] = verification_accuracy(pairs, queries[i], galleries[j])
            else:
                values[i, j] = retrieval_map(queries[i], galleries[j])
    return CompatibilityMatrix(values=values, metric=metric)


def select_compatible_epoch(scores, previous_self_test: float):
    """Pick the epoch with the best self-test among compatibility-feasible ones.

    ``scores`` is a sequence of (self_test, cross_test) measured per epoch;
    an epoch is feasible when its cross-test strictly beats the previous
    model's self-test. Returns (epoch_index, constraint_satisfied); when no
    epoch is feasible the final epoch is returned with the flag lowered.
    Ties on the self-test keep the earliest feasible epoch.
    """
    seq = [(float(s), float(c)) for s, c in scores]
    if not seq:
        raise InvalidParameterError("scores must be non-empty")
    prev = float(previous_self_test)
    best = None
    for idx, (self_test, cross_test) in enumerate(seq):
        if cross_test > prev and (best is None or self_test > seq[best][0]):
            best = idx
    if best is None:
        return len(seq) - 1, False
    return best, True


@dataclass(frozen=True)
class CriterionAudit:
    """Sampled check of the pairwise compatibility inequalities.

    ``fraction`` is the share of sampled pairs satisfying the criterion
    (non-strict inequalities), or None when no pairs could be sampled.
    """

    fraction: float | None
    num_pairs: int
    num_same_class: int
    num_cross_class: int


def pairwise_criterion_audit(features_new, features_old, labels,
                             sample_cap: int, seed: int = 0) -> CriterionAudit:
    """Estimate how often the upgraded extractor moves pairs the right way.

    For a same-class pair (u, v) the new-to-old distance d(new_u, old_v) must
    not exceed the old self distance d(old_u, old_v); for a cross-class pair
    it must not fall below it. At most ``sample_cap`` pairs of each kind are
    drawn; a cap of zero yields an undefined audit rather than a division by
    zero.
    """
    fn = _as_float_rows(features_new, "features_new")
    fo = _as_float_rows(features_old, "features_old")
    y = np.asarray(labels, dtype=np.int64).ravel()
    if fn.shape != fo.shape or y.shape != (fn.shape[0],):
        raise InvalidParameterError("feature arrays and labels must align row-wise")
    if sample_cap < 0:
        raise InvalidParameterError(f"sample_cap must be >= 0, got {sample_cap}")

    total_pos, total_neg = pair_space_sizes(y)
    k_pos = min(sample_cap, total_pos)
    k_neg = min(sample_cap, total_neg)
    if k_pos == 0 and k_neg == 0:
        return CriterionAudit(fraction=None, num_pairs=0,
                              num_same_class=0, num_cross_class=0)

    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 4]))
    pos_u, pos_v, neg_u, neg_v = sample_pair_arrays(y, None, k_pos, k_neg, rng)

    def row_dist(a, rows_a, b, rows_b):
        av = a[rows_a]
        bv = b[rows_b]
        an = _safe_norms(av, "features")
        bn = _safe_norms(bv, "features")
        return 1.0 - np.einsum("ij,ij->i", av, bv) / (an * bn)

    satisfied = 0
    if k_pos:
        satisfied += int(np.sum(
            row_dist(fn, pos_u, fo, pos_v) <= row_dist(fo, pos_u, fo, pos_v)
        ))
    if k_neg:
        satisfied += int(np.sum(
            row_dist(fn, neg_u, fo, neg_v) >= row_dist(fo, neg_u, fo, neg_v)
        ))
    total = k_pos + k_neg
    return CriterionAudit(
        fraction=satisfied / total,
        num_pairs=total,
        num_same_class=k_pos,
        num_cross_class=k_neg,
    )
