"""Canned experiment presets, aggregate tables, and summary figures.

A preset bundles everything a multi-method comparison needs: the synthetic
dataset recipe, the upgrade schedule, training hyper-parameters, and the
evaluation protocol. Running one produces a directory tree with one run per
(method, seed), per-run JSON reports and text matrices, an aggregate CSV of
AC/AM statistics, and rendered figures.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .data import Method, TimelineMode, build_timeline, gen_blobs
from .errors import InvalidParameterError, RunExistsError, UnknownPresetError
from .gallery import manifest_digest, sha256_bytes
from .metrics import (
    METRIC_VERIFICATION,
    METRICS,
    build_compatibility_matrix,
    build_report,
    render_matrix_table,
    report_to_json_dict,
)
from .netcore import FeatureModel, TrainConfig
from .polytope import (
    FixedClassifier,
    PolytopeKind,
    dsimplex_prototypes,
    polygon_prototypes,
)
from .timeline import build_eval_protocol, run_timeline


@dataclass(frozen=True)
class ExperimentPreset:
    """Fully serialized description of one comparison experiment.

    Two datasets are drawn: training classes from ``data_seed`` and a
    disjoint world of never-seen evaluation classes from ``data_seed + 1000``.
    ``split_seed`` pins the timeline's subset draws so every method and every
    run seed upgrades through the identical data sequence; ``seeds`` vary
    only initialisation, batch order, and pair sampling.
    """

    name: str
    fractions: tuple
    mode: str = TimelineMode.BY_SAMPLE.value
    methods: tuple = (Method.CORES.value,)
    seeds: tuple = (0,)
    metric: str = METRIC_VERIFICATION
    polytope: str = PolytopeKind.D_SIMPLEX.value
    num_outputs: int = 10
    train_classes: int = 10
    eval_classes: int = 10
    train_per_class: int = 16
    eval_per_class: int = 150
    input_dim: int = 8
    spread: float = 0.35
    data_seed: int = 1
    split_seed: int = 1
    epochs: int = 150
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-3
    batch_size: int = 1024
    lr_schedule: tuple = ((100, 0.01),)
    hidden_dims: tuple = (32,)
    n_pos: int = 4000
    n_neg: int = 4000
    model_selection: bool = False
    l2_lambda: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "fractions", tuple(float(f) for f in self.fractions))
        object.__setattr__(self, "methods", tuple(Method(m).value for m in self.methods))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "mode", TimelineMode(self.mode).value)
        object.__setattr__(self, "polytope", PolytopeKind(self.polytope).value)
        object.__setattr__(
            self, "lr_schedule", tuple((int(e), float(r)) for e, r in self.lr_schedule)
        )
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        if not self.name:
            raise InvalidParameterError("preset name must be non-empty")
        if self.metric not in METRICS:
            raise InvalidParameterError(
                f"metric must be one of {METRICS}, got {self.metric!r}"
            )
        if not self.methods:
            raise InvalidParameterError("preset needs at least one method")
        if not self.seeds:
            raise InvalidParameterError("preset needs at least one seed")
        if len(self.fractions) < 2:
            raise InvalidParameterError("preset needs at least two fractions")

    def to_json_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json_dict(cls, data: dict) -> "ExperimentPreset":
        return cls(**data)

    def digest(self) -> str:
        canonical = json.dumps(self.to_json_dict(), sort_keys=True)
        return sha256_bytes(canonical.encode())

    @property
    def num_steps(self) -> int:
        return len(self.fractions)


def _classifier(preset: ExperimentPreset) -> FixedClassifier:
    if preset.polytope == PolytopeKind.POLYGON_2D.value:
        return polygon_prototypes(preset.num_outputs)
    return dsimplex_prototypes(preset.num_outputs)


def preset_datasets(preset: ExperimentPreset):
    """Materialize the (train_set, eval_set) pair a preset describes.

    Both worlds contain train+eval many classes; the training set keeps the
    first ``train_classes`` of its world and the evaluation set keeps the
    remainder of an independently drawn world, so class labels and class
    geometry are both disjoint between the two.
    """
    total = preset.train_classes + preset.eval_classes
    tdata = gen_blobs(total, preset.train_per_class, preset.input_dim,
                      preset.spread, preset.data_seed)
    edata = gen_blobs(total, preset.eval_per_class, preset.input_dim,
                      preset.spread, preset.data_seed + 1000)
    head_ids = tdata.class_ids[: preset.train_classes]
    train_set = tdata.take(np.flatnonzero(np.isin(tdata.labels, head_ids)))
    eval_set = edata.take(np.flatnonzero(~np.isin(edata.labels, head_ids)))
    return train_set, eval_set


def _train_config(preset: ExperimentPreset) -> TrainConfig:
    return TrainConfig(
        learning_rate=preset.learning_rate,
        momentum=preset.momentum,
        weight_decay=preset.weight_decay,
        batch_size=preset.batch_size,
        epochs=preset.epochs,
        lr_schedule=preset.lr_schedule,
    )


@dataclass(frozen=True)
class RunRecord:
    method: str
    seed: int
    run_dir: Path
    report: dict


@dataclass(frozen=True)
class AggregateRow:
    method: str
    num_seeds: int
    ac_mean: float
    ac_std: float
    am_mean: float
    am_std: float


@dataclass(frozen=True)
class PresetResult:
    preset: ExperimentPreset
    out_dir: Path
    runs: tuple
    aggregate: tuple

    def run(self, method: str, seed: int) -> RunRecord:
        for record in self.runs:
            if record.method == method and record.seed == seed:
                return record
        raise InvalidParameterError(f"no run for method={method!r} seed={seed}")

    def row(self, method: str) -> AggregateRow:
        for row in self.aggregate:
            if row.method == method:
                return row
        raise InvalidParameterError(f"no aggregate row for method={method!r}")


def execute_run(preset: ExperimentPreset, method: str, seed: int, run_dir,
                force: bool = False) -> dict:
    """Train one (method, seed) timeline and write its report files.

    Returns the report JSON dict that was written to ``run_dir/report.json``.
    """
    train_set, eval_set = preset_datasets(preset)
    timeline = build_timeline(
        train_set,
        fractions=preset.fractions,
        mode=TimelineMode(preset.mode),
        method=Method(method),
        seed=preset.split_seed,
        config=_train_config(preset),
    )
    protocol = build_eval_protocol(eval_set, n_pos=preset.n_pos,
                                   n_neg=preset.n_neg, seed=seed)
    result = run_timeline(
        timeline,
        _classifier(preset),
        protocol,
        out_dir=run_dir,
        seed=seed,
        hidden_dims=preset.hidden_dims,
        model_selection=preset.model_selection,
        l2_lambda=preset.l2_lambda,
        force=force,
        extra_manifest={"preset": preset.name, "preset_digest": preset.digest()},
    )
    pairs = protocol.pairs if preset.metric == METRIC_VERIFICATION else None
    matrix = build_compatibility_matrix(run_dir, preset.metric, pairs=pairs)
    report = build_report(matrix)
    report_dict = report_to_json_dict(report, manifest_digest(run_dir))
    run_path = Path(run_dir)
    (run_path / "report.json").write_text(
        json.dumps(report_dict, sort_keys=True, indent=1) + "\n"
    )
    (run_path / "matrix.txt").write_text(render_matrix_table(report))
    if preset.polytope == PolytopeKind.POLYGON_2D.value:
        final = result.registry.latest
        emit_feature_dump_2d(
            final.model, _classifier(preset), eval_set,
            run_path / "features2d.csv", run_path / "features2d.png",
        )
    return report_dict


def _worker(preset_dict: dict, method: str, seed: int, run_dir: str,
            force: bool) -> None:
    execute_run(ExperimentPreset.from_json_dict(preset_dict), method, seed,
                run_dir, force=force)


def _max_workers() -> int:
    raw = os.environ.get("CORES_THREADS", "1")
    try:
        workers = int(raw)
    except ValueError as exc:
        raise InvalidParameterError(
            f"CORES_THREADS must be an integer, got {raw!r}"
        ) from exc
    if workers < 1:
        raise InvalidParameterError(f"CORES_THREADS must be >= 1, got {workers}")
    return workers


def run_preset(preset: ExperimentPreset, out_dir, force: bool = False) -> PresetResult:
    """Run every (method, seed) combination and aggregate the results.

    Layout under ``out_dir``: ``preset.json``, one run directory per
    combination at ``<method>/seed<seed>/``, ``runs.csv`` with per-run AC/AM,
    ``aggregate.csv`` with mean and population std over seeds, and PNG
    figures (per-method matrix heatmaps plus an AC/AM summary chart).
    CORES_THREADS > 1 runs combinations in parallel worker processes.
    """
    out = Path(out_dir)
    if (out / "preset.json").exists() and not force:
        raise RunExistsError(
            f"{out}: preset results already present; pass force to overwrite"
        )
    out.mkdir(parents=True, exist_ok=True)
    (out / "preset.json").write_text(
        json.dumps(
            {"preset": preset.to_json_dict(), "digest": preset.digest()},
            sort_keys=True, indent=1,
        )
        + "\n"
    )

    combos = [(m, s) for m in preset.methods for s in preset.seeds]
    dirs = {combo: out / combo[0] / f"seed{combo[1]}" for combo in combos}
    workers = _max_workers()
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        preset_dict = preset.to_json_dict()
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_worker, preset_dict, m, s, str(dirs[(m, s)]), force)
                for m, s in combos
            ]
            for future in futures:
                future.result()
        reports = {
            combo: json.loads((dirs[combo] / "report.json").read_text())
            for combo in combos
        }
    else:
        reports = {
            (m, s): execute_run(preset, m, s, dirs[(m, s)], force=force)
            for m, s in combos
        }

    runs = tuple(
        RunRecord(method=m, seed=s, run_dir=dirs[(m, s)], report=reports[(m, s)])
        for m, s in combos
    )
    aggregate = tuple(_aggregate_rows(preset, reports))
    _write_runs_csv(out / "runs.csv", runs)
    _write_aggregate_csv(out / "aggregate.csv", aggregate)
    _render_figures(preset, out, runs, aggregate)
    return PresetResult(preset=preset, out_dir=out, runs=runs, aggregate=aggregate)


def _aggregate_rows(preset: ExperimentPreset, reports: dict):
    for method in preset.methods:
        acs = np.array([reports[(method, s)]["ac"] for s in preset.seeds], dtype=float)
        ams = np.array([reports[(method, s)]["am"] for s in preset.seeds], dtype=float)
        yield AggregateRow(
            method=method,
            num_seeds=len(preset.seeds),
            ac_mean=float(acs.mean()),
            ac_std=float(acs.std()),
            am_mean=float(ams.mean()),
            am_std=float(ams.std()),
        )


def _write_runs_csv(path: Path, runs) -> None:
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["method", "seed", "ac", "am"])
        for record in runs:
            writer.writerow([
                record.method,
                record.seed,
                f"{record.report['ac']:.12g}",
                f"{record.report['am']:.12g}",
            ])


def _write_aggregate_csv(path: Path, aggregate) -> None:
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["method", "num_seeds", "ac_mean", "ac_std", "am_mean", "am_std"])
        for row in aggregate:
            writer.writerow([
                row.method,
                row.num_seeds,
                f"{row.ac_mean:.12g}",
                f"{row.ac_std:.12g}",
                f"{row.am_mean:.12g}",
                f"{row.am_std:.12g}",
            ])


def _mean_matrix(runs, method: str) -> np.ndarray:
    rows = [r.report["matrix"] for r in runs if r.method == method]
    t = len(rows[0])
    stacked = np.full((len(rows), t, t), np.nan)
    for k, lower in enumerate(rows):
        for i, row in enumerate(lower):
            stacked[k, i, : i + 1] = row
    return stacked.mean(axis=0)


def _render_figures(preset: ExperimentPreset, out: Path, runs, aggregate) -> None:
    for method in preset.methods:
        mean = _mean_matrix(runs, method)
        t = mean.shape[0]
        fig, ax = plt.subplots(figsize=(1.0 + 0.6 * t, 0.8 + 0.6 * t))
        shown = np.ma.masked_invalid(mean)
        image = ax.imshow(shown, cmap="viridis")
        ax.set_xticks(range(t), [f"g{j + 1}" for j in range(t)])
        ax.set_yticks(range(t), [f"q{i + 1}" for i in range(t)])
        ax.set_xlabel("gallery model")
        ax.set_ylabel("query model")
        ax.set_title(f"{preset.name}: {method} mean {preset.metric}")
        if t <= 10:
            for i in range(t):
                for j in range(i + 1):
                    ax.text(j, i, f"{mean[i, j]:.2f}", ha="center", va="center",
                            color="white", fontsize=7)
        fig.colorbar(image, ax=ax, shrink=0.8)
        fig.savefig(out / f"fig_matrix_{method}.png", dpi=120,
                    bbox_inches="tight")
        plt.close(fig)

    methods = [row.method for row in aggregate]
    fig, axes = plt.subplots(1, 2, figsize=(2.2 * len(methods) + 3, 3.2))
    for ax, label, means, stds in (
        (axes[0], "AC", [r.ac_mean for r in aggregate], [r.ac_std for r in aggregate]),
        (axes[1], "AM", [r.am_mean for r in aggregate], [r.am_std for r in aggregate]),
    ):
        ax.bar(methods, means, yerr=stds, capsize=4, color="#4878a8")
        ax.set_ylim(0, 1)
        ax.set_ylabel(label)
        ax.set_title(f"{label} over {aggregate[0].num_seeds} seeds")
    fig.suptitle(preset.name)
    fig.tight_layout()
    fig.savefig(out / "fig_summary.png", dpi=120)
    plt.close(fig)


def emit_feature_dump_2d(model: FeatureModel, classifier: FixedClassifier,
                         eval_set, csv_path, png_path=None) -> None:
    """Dump 2-D features with the polygon prototypes in a header block.

    The CSV starts with one ``# prototype,...`` comment line per classifier
    output (index, angle in degrees, x, y), then a ``x,y,label`` header and
    one row per sample. Angles let external tooling check feature-to-prototype
    alignment without redoing the geometry.
    """
    if classifier.kind is not PolytopeKind.POLYGON_2D:
        raise InvalidParameterError(
            f"2-D dumps need a polygon classifier, got {classifier.kind.value}"
        )
    if model.layer_dims[-1] != 2:
        raise InvalidParameterError(
            f"model produces {model.layer_dims[-1]}-D features, need 2-D"
        )
    features = model.forward(np.asarray(eval_set.samples, dtype=float))
    labels = eval_set.labels
    # prototype columns: row 0 holds x components, row 1 holds y
    angles = np.degrees(np.arctan2(classifier.prototypes[1, :],
                                   classifier.prototypes[0, :])) % 360.0
    lines = []
    for idx, angle in enumerate(angles):
        x, y = classifier.prototypes[:, idx]
        lines.append(f"# prototype,{idx},{angle:.6f},{x:.12g},{y:.12g}")
    lines.append("x,y,label")
    for (x, y), label in zip(features, labels):
        lines.append(f"{x:.12g},{y:.12g},{int(label)}")
    Path(csv_path).write_text("\n".join(lines) + "\n")

    if png_path is not None:
        fig, ax = plt.subplots(figsize=(5, 5))
        reach = max(1.0, float(np.abs(features).max()) * 1.05)
        for idx in range(classifier.num_outputs):
            px, py = classifier.prototypes[:, idx]
            ax.plot([0, px * reach], [0, py * reach], color="0.8", lw=1, zorder=1)
        scatter = ax.scatter(features[:, 0], features[:, 1], c=labels, s=8,
                             cmap="tab10", zorder=2)
        ax.set_aspect("equal")
        ax.set_xlabel("feature x")
        ax.set_ylabel("feature y")
        ax.set_title("2-D evaluation features")
        fig.colorbar(scatter, ax=ax, shrink=0.8, label="class")
        fig.savefig(png_path, dpi=120, bbox_inches="tight")
        plt.close(fig)


def _ladder(num_steps: int) -> tuple:
    return tuple((k + 1) / num_steps for k in range(num_steps))


BUILTIN_PRESETS = {
    "blobs-smoke": ExperimentPreset(
        name="blobs-smoke",
        fractions=(0.5, 1.0),
        methods=(Method.CORES.value,),
        seeds=(0,),
        epochs=40,
        lr_schedule=(),
    ),
    "blobs-1step": ExperimentPreset(
        name="blobs-1step",
        fractions=(0.5, 1.0),
        methods=(Method.CORES.value, Method.IFT.value, Method.ITM.value,
                 Method.L2.value),
        seeds=(0, 1, 2, 3, 4),
    ),
    "blobs-2step": ExperimentPreset(
        name="blobs-2step",
        fractions=_ladder(3),
        methods=(Method.CORES.value, Method.ITM.value),
        seeds=(0, 1, 2),
        train_per_class=32,
    ),
    "blobs-4step": ExperimentPreset(
        name="blobs-4step",
        fractions=_ladder(5),
        methods=(Method.CORES.value, Method.ITM.value),
        seeds=(0, 1, 2),
        train_per_class=48,
    ),
    "blobs-9step": ExperimentPreset(
        name="blobs-9step",
        fractions=_ladder(10),
        methods=(Method.CORES.value, Method.IFT.value, Method.ITM.value,
                 Method.L2.value),
        seeds=(0, 1, 2, 3, 4),
        train_per_class=64,
    ),
    "blobs-polygon": ExperimentPreset(
        name="blobs-polygon",
        fractions=(0.5, 1.0),
        methods=(Method.CORES.value,),
        seeds=(0,),
        polytope=PolytopeKind.POLYGON_2D.value,
        epochs=80,
        lr_schedule=((60, 0.01),),
    ),
}


def get_preset(name: str) -> ExperimentPreset:
    try:
        return BUILTIN_PRESETS[name]
    except KeyError:
        known = ", ".join(sorted(BUILTIN_PRESETS))
        raise UnknownPresetError(f"unknown preset {name!r}; bundled: {known}") from None
