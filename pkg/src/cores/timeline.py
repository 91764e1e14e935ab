"""Sequential upgrade runs: train per step, persist checkpoints and galleries.

A run walks the nested training sets of an :class:`~cores.data.UpgradeTimeline`,
trains one model per step with the timeline's method, and after each step
extracts query/gallery features for a fixed evaluation split and writes them
to per-step gallery files. Those files are never touched again: later steps
and later evaluations always read the stored bytes, which is exactly the
no-re-indexing discipline the compatibility metrics assume.
"""

from __future__ import annotations

import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._version import __version__
from .data import (
    LabeledSet,
    Method,
    UpgradeTimeline,
    make_verification_pairs,
    pair_space_sizes,
)
from .errors import (
    CapacityExceededError,
    InsufficientDataError,
    InvalidParameterError,
    MissingArgumentError,
    RunExistsError,
    UndefinedDistanceError,
)
from .gallery import (
    FeatureGallery,
    sha256_file,
    write_gallery,
    write_manifest,
)
from .metrics import (
    METRIC_VERIFICATION,
    METRICS,
    retrieval_map,
    select_compatible_epoch,
    verification_accuracy,
)
from .netcore import (
    FeatureModel,
    InitMode,
    SgdState,
    TrainConfig,
    backprop,
    init_model,
    save_checkpoint,
    schedule_rates,
    sgd_step,
    softmax_cross_entropy,
    train_epochs,
)
from .polytope import FixedClassifier, allocate_classes

# Salt constants keep every consumer of the run seed on its own RNG stream.
_TAG_INIT = 11
_TAG_SHUFFLE = 12
_TAG_HEAD = 13
_TAG_SPLIT = 14
_TAG_PAIRS = 15
_TAG_MS = 16
TAG_TIMELINE = 17
TAG_PROTOCOL = 18


def derive_seed(*parts) -> int:
    """Deterministically derive an independent 64-bit seed from integer parts."""
    values = [int(p) for p in parts]
    if any(v < 0 for v in values):
        raise InvalidParameterError(f"seed parts must be >= 0, got {values}")
    return int(np.random.SeedSequence(values).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class EvalProtocol:
    """Fixed evaluation split: disjoint query and gallery rows plus pairs.

    The split is stratified per class with the gallery taking the larger
    half, so every evaluation class keeps at least one gallery row. ``pairs``
    index query rows against gallery rows and may be None when the protocol
    is built for feature extraction only.
    """

    eval_set: LabeledSet
    query_set: LabeledSet
    gallery_set: LabeledSet
    pairs: object
    n_pos: int | None
    n_neg: int | None
    seed: int


def _stratified_halves(labeled_set: LabeledSet, rng: np.random.Generator):
    first, second = [], []
    for c in labeled_set.class_ids:
        rows = np.flatnonzero(labeled_set.labels == c)
        rows = rows[rng.permutation(rows.size)]
        half = (rows.size + 1) // 2
        first.append(rows[:half])
        second.append(rows[half:])
    return np.concatenate(first), np.concatenate(second)


def build_eval_protocol(
    eval_set: LabeledSet,
    seed: int,
    n_pos: int | None = None,
    n_neg: int | None = None,
) -> EvalProtocol:
    """Split an evaluation set into query and gallery halves, seeded.

    When pair counts are given, verification pairs are sampled immediately so
    the protocol is self-contained; otherwise pairs stay None and evaluation
    commands sample them later from the stored gallery labels.
    """
    if eval_set.num_classes < 2:
        raise InsufficientDataError(
            f"evaluation needs >= 2 classes, got {eval_set.num_classes}"
        )
    if seed < 0:
        raise InvalidParameterError(f"seed must be >= 0, got {seed}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 5]))
    gallery_rows, query_rows = _stratified_halves(eval_set, rng)
    if query_rows.size < 1:
        raise InsufficientDataError(
            "every evaluation class has a single sample; no query rows remain"
        )
    query_set = eval_set.take(query_rows)
    gallery_set = eval_set.take(gallery_rows)
    pairs = None
    if n_pos is not None or n_neg is not None:
        if n_pos is None or n_neg is None:
            raise InvalidParameterError("pass both n_pos and n_neg or neither")
        pairs = make_verification_pairs(
            query_set.labels, n_pos, n_neg,
            derive_seed(seed, _TAG_PAIRS), gallery_labels=gallery_set.labels,
        )
    return EvalProtocol(
        eval_set=eval_set,
        query_set=query_set,
        gallery_set=gallery_set,
        pairs=pairs,
        n_pos=n_pos,
        n_neg=n_neg,
        seed=int(seed),
    )


def extract_gallery(model: FeatureModel, classifier: FixedClassifier,
                    labeled_set: LabeledSet, model_id: str) -> FeatureGallery:
    """Run the extractor over a set, keeping rows in input order.

    Pure function of its inputs: extracting twice gives identical features.
    The classifier argument pins the expected feature dimension.
    """
    if model.output_dim != classifier.dim:
        raise InvalidParameterError(
            f"model output dim {model.output_dim} does not match "
            f"classifier dim {classifier.dim}"
        )
    features = model.forward(labeled_set.samples)
    return FeatureGallery(model_id=model_id, labels=labeled_set.labels,
                          features=features)


# ---------------------------------------------------------------------------
# trainable-head training used by the baseline methods


def _fresh_head(feature_dim: int, num_outputs: int, seed: int) -> np.ndarray:
    if num_outputs < 1:
        raise InvalidParameterError(f"head needs >= 1 output, got {num_outputs}")
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    bound = np.sqrt(6.0 / (feature_dim + num_outputs))
    return rng.uniform(-bound, bound, size=(feature_dim, num_outputs))


def _expanded_head(previous_head: np.ndarray, num_outputs: int, seed: int) -> np.ndarray:
    old_n = previous_head.shape[1]
    if num_outputs < old_n:
        raise InvalidParameterError(
            f"cannot shrink head from {old_n} to {num_outputs} outputs"
        )
    head = _fresh_head(previous_head.shape[0], num_outputs, seed)
    head[:, :old_n] = previous_head
    return head


def train_with_head(
    model: FeatureModel,
    head: np.ndarray,
    inputs: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig,
    seed: int,
    old_model: FeatureModel | None = None,
    old_mask: np.ndarray | None = None,
    lam: float = 0.0,
    on_epoch=None,
) -> list:
    """Train backbone and learnable head jointly with cross-entropy.

    With ``old_model`` and ``lam`` > 0, an extra penalty pulls each old
    sample's new feature toward its frozen old feature:

        loss += lam * mean over old samples in the batch of
                ||feature_new(x) - feature_old(x)||_2

    ``old_mask`` marks which rows count as old; None means all of them. The
    old model is never updated; its features are computed once up front.
    Returns per-epoch mean losses; the model and head update in place.
    """
    x = model._check_inputs(inputs)
    y = np.asarray(labels)
    n = x.shape[0]
    if head.ndim != 2 or head.shape[0] != model.output_dim:
        raise InvalidParameterError(
            f"head shape {head.shape} does not match feature dim {model.output_dim}"
        )
    if y.shape != (n,):
        raise InvalidParameterError(f"labels must have shape ({n},), got {y.shape}")
    if lam < 0:
        raise InvalidParameterError(f"lambda must be >= 0, got {lam}")
    if seed < 0:
        raise InvalidParameterError(f"seed must be >= 0, got {seed}")

    old_positions = None
    old_feats = None
    if lam > 0 and old_model is not None:
        if old_model.output_dim != model.output_dim:
            raise InvalidParameterError("old model feature dim differs from new model")
        mask = (np.ones(n, dtype=bool) if old_mask is None
                else np.asarray(old_mask, dtype=bool))
        if mask.shape != (n,):
            raise InvalidParameterError(f"old_mask must have shape ({n},)")
        old_rows = np.flatnonzero(mask)
        old_positions = np.full(n, -1, dtype=np.int64)
        old_positions[old_rows] = np.arange(old_rows.size)
        if old_rows.size:
            old_feats = old_model.forward(x[old_rows])

    state = SgdState.zeros_like(model)
    head_velocity = np.zeros_like(head)
    rates = schedule_rates(config)
    losses = []
    for epoch in range(config.epochs):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), epoch]))
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            rows = order[start:start + config.batch_size]
            feats, acts = model.forward_cached(x[rows])
            loss, dlogits = softmax_cross_entropy(feats @ head, y[rows])
            dfeat = dlogits @ head.T
            dhead = feats.T @ dlogits

            if old_feats is not None:
                in_old = old_positions[rows]
                sel = np.flatnonzero(in_old >= 0)
                if sel.size:
                    diff = feats[sel] - old_feats[in_old[sel]]
                    dist = np.linalg.norm(diff, axis=1)
                    loss += lam * float(dist.mean())
                    keep = dist > 0
                    if keep.any():
                        dfeat[sel[keep]] += (
                            lam * diff[keep] / (dist[keep, None] * sel.size)
                        )

            sgd_step(model, backprop(model, acts, dfeat), config, state,
                     lr=rates[epoch])
            head_velocity *= config.momentum
            head_velocity += dhead + config.weight_decay * head
            head -= rates[epoch] * head_velocity
            total += loss * rows.size
        mean_loss = total / n
        losses.append(mean_loss)
        if on_epoch is not None:
            on_epoch(epoch, model, mean_loss)
    return losses


def _mapped_labels(step_set: LabeledSet, mapping: dict) -> np.ndarray:
    return np.array([mapping[int(c)] for c in step_set.labels], dtype=np.int64)


def _identity_mapping(step_set: LabeledSet) -> dict:
    return {int(c): i for i, c in enumerate(step_set.class_ids)}


def train_itm(
    step_set: LabeledSet,
    config: TrainConfig,
    feature_dim: int,
    seed: int = 0,
    hidden_dims=(64, 32),
    on_epoch=None,
):
    """Independently trained model: fresh backbone, fresh head, this step only.

    Labels map to head outputs in order of first appearance. Returns
    (model, head).
    """
    dims = [step_set.input_dim, *hidden_dims, int(feature_dim)]
    model = init_model(dims, derive_seed(seed, _TAG_INIT, 1), InitMode.FRESH_RANDOM)
    head = _fresh_head(int(feature_dim), step_set.num_classes,
                       derive_seed(seed, _TAG_HEAD, 1))
    y = _mapped_labels(step_set, _identity_mapping(step_set))
    train_with_head(model, head, step_set.samples, y, config,
                    derive_seed(seed, _TAG_SHUFFLE, 1), on_epoch=on_epoch)
    return model, head


def train_ift(
    step_set: LabeledSet,
    config: TrainConfig,
    previous_model: FeatureModel,
    previous_head: np.ndarray,
    seed: int = 0,
    on_epoch=None,
):
    """Fine-tuned upgrade: start from the previous backbone, widen the head.

    Old head columns are copied; columns for new classes are freshly drawn.
    Returns (model, head).
    """
    if previous_model is None or previous_head is None:
        raise MissingArgumentError("fine-tuning needs the previous model and head")
    model = init_model(previous_model.layer_dims, previous_model.seed,
                       InitMode.FINE_TUNE, previous_model)
    head = _expanded_head(previous_head, step_set.num_classes,
                          derive_seed(seed, _TAG_HEAD, 2))
    y = _mapped_labels(step_set, _identity_mapping(step_set))
    train_with_head(model, head, step_set.samples, y, config,
                    derive_seed(seed, _TAG_SHUFFLE, 2), on_epoch=on_epoch)
    return model, head


def train_l2_baseline(
    step_set: LabeledSet,
    old_model: FeatureModel,
    lam: float,
    config: TrainConfig,
    seed: int = 0,
    hidden_dims=(64, 32),
    old_mask: np.ndarray | None = None,
    on_epoch=None,
):
    """Feature-distillation baseline: cross-entropy plus an L2 pull toward
    the frozen old extractor's features on old samples.

    ``old_mask`` marks the rows of ``step_set`` that belong to the previous
    training set; None penalises every row. lam = 0 reduces to plain
    cross-entropy training. Returns (model, head).
    """
    if lam < 0:
        raise InvalidParameterError(f"lambda must be >= 0, got {lam}")
    if old_model is None:
        raise MissingArgumentError("the l2 baseline needs the frozen old model")
    dims = [step_set.input_dim, *hidden_dims, old_model.output_dim]
    model = init_model(dims, derive_seed(seed, _TAG_INIT, 1), InitMode.FRESH_RANDOM)
    head = _fresh_head(old_model.output_dim, step_set.num_classes,
                       derive_seed(seed, _TAG_HEAD, 1))
    y = _mapped_labels(step_set, _identity_mapping(step_set))
    train_with_head(model, head, step_set.samples, y, config,
                    derive_seed(seed, _TAG_SHUFFLE, 1),
                    old_model=old_model, old_mask=old_mask, lam=lam,
                    on_epoch=on_epoch)
    return model, head


# ---------------------------------------------------------------------------
# model selection


def _ms_score(metric: str, pairs, query: FeatureGallery,
              gallery: FeatureGallery) -> float:
    if metric == METRIC_VERIFICATION:
        return verification_accuracy(pairs, query, gallery)
    return retrieval_map(query, gallery)


class _StepSelector:
    """Tracks per-epoch self/cross tests and snapshots the best feasible epoch.

    Feasibility and tie-breaking mirror
    :func:`cores.metrics.select_compatible_epoch`: cross-test strictly above
    the previous model's self-test, then the best (earliest on ties)
    self-test wins.
    """

    def __init__(self, query_set, ghat_set, ms_pairs, metric,
                 previous_ghat: FeatureGallery, previous_self: float,
                 live_head=None):
        self.query_set = query_set
        self.ghat_set = ghat_set
        self.ms_pairs = ms_pairs
        self.metric = metric
        self.previous_ghat = previous_ghat
        self.previous_self = float(previous_self)
        self.live_head = live_head
        self.scores = []
        self.best_model = None
        self.best_head = None
        self.best_epoch = None

    def score(self, query: FeatureGallery, gallery: FeatureGallery) -> float:
        return _ms_score(self.metric, self.ms_pairs, query, gallery)

    def __call__(self, epoch: int, model: FeatureModel, mean_loss: float):
        query = FeatureGallery("candidate", self.query_set.labels,
                               model.forward(self.query_set.samples))
        ghat = FeatureGallery("candidate", self.ghat_set.labels,
                              model.forward(self.ghat_set.samples))
        self_test = self.score(query, ghat)
        cross_test = self.score(query, self.previous_ghat)
        feasible = cross_test > self.previous_self
        if feasible and (self.best_epoch is None
                         or self_test > self.scores[self.best_epoch][0]):
            self.best_epoch = epoch
            self.best_model = model.copy()
            self.best_head = None if self.live_head is None else self.live_head.copy()
        self.scores.append((self_test, cross_test))


# ---------------------------------------------------------------------------
# the run itself


@dataclass
class RegistryEntry:
    """One upgrade step's trained artifacts."""

    step: int
    model_id: str
    method: Method
    model: FeatureModel
    classifier: FixedClassifier | None
    head: np.ndarray | None
    checkpoint_path: Path
    selected_epoch: int | None
    ms_constraint_satisfied: bool | None


class ModelRegistry:
    """Append-only, contiguous sequence of step entries."""

    def __init__(self):
        self._entries = []

    def append(self, entry: RegistryEntry) -> None:
        if entry.step != len(self._entries) + 1:
            raise InvalidParameterError(
                f"registry steps must be contiguous; expected step "
                f"{len(self._entries) + 1}, got {entry.step}"
            )
        self._entries.append(entry)

    def __len__(self) -> int:
        return len(self._entries)

    def __getitem__(self, idx: int) -> RegistryEntry:
        return self._entries[idx]

    def __iter__(self):
        return iter(self._entries)

    @property
    def latest(self) -> RegistryEntry:
        return self._entries[-1]


@dataclass
class RunResult:
    out_dir: Path
    registry: ModelRegistry
    manifest: dict


def _prepare_run_dir(out_dir: Path, force: bool) -> None:
    has_artifacts = (out_dir / "manifest.json").exists() or any(out_dir.glob("step*"))
    if has_artifacts:
        if not force:
            raise RunExistsError(
                f"{out_dir}: run artifacts already present; re-running a "
                "completed step is refused without force"
            )
        shutil.rmtree(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)


def _init_backbone(mode: InitMode, step: int, dims, run_seed: int,
                   previous: FeatureModel | None) -> FeatureModel:
    if mode is InitMode.FINE_TUNE:
        return init_model(dims, previous.seed if previous else 0,
                          InitMode.FINE_TUNE, previous)
    if mode is InitMode.SAME_SEED:
        return init_model(dims, derive_seed(run_seed, _TAG_INIT), mode)
    return init_model(dims, derive_seed(run_seed, _TAG_INIT, step), mode)


def _ms_context(protocol: EvalProtocol, run_seed: int, metric: str):
    """Carve a selection gallery out of the protocol's gallery half."""
    rng = np.random.default_rng(np.random.SeedSequence([int(run_seed), 6]))
    ghat_rows, _ = _stratified_halves(protocol.gallery_set, rng)
    ghat_set = protocol.gallery_set.take(ghat_rows)
    total_pos, total_neg = pair_space_sizes(
        protocol.query_set.labels, ghat_set.labels
    )
    n_pos = min(2000, total_pos)
    n_neg = min(2000, total_neg)
    if n_pos < 1 or n_neg < 1:
        raise InsufficientDataError(
            "model selection needs both same-class and cross-class pairs "
            "between the query split and the selection gallery"
        )
    pairs = make_verification_pairs(
        protocol.query_set.labels, n_pos, n_neg,
        derive_seed(run_seed, _TAG_MS), gallery_labels=ghat_set.labels,
    )
    return ghat_set, pairs


def run_timeline(
    timeline: UpgradeTimeline,
    fc_template: FixedClassifier,
    protocol: EvalProtocol,
    out_dir,
    seed: int,
    hidden_dims=(64, 32),
    model_selection: bool = False,
    ms_metric: str = METRIC_VERIFICATION,
    l2_lambda: float = 1.0,
    force: bool = False,
    extra_manifest: dict | None = None,
) -> RunResult:
    """Execute every upgrade step and persist its artifacts.

    Per step: allocate any new classes, initialise per the timeline's method,
    train, optionally pick a checkpoint epoch by the compatibility-aware
    selection rule (steps >= 2), then write the checkpoint and the step's
    query/gallery feature files. Earlier steps' files are never recomputed or
    rewritten; their digests go into the run manifest as they are written.

    The classifier template must have room for every class the final step
    contains. For the fixed-classifier method the template's prototypes are
    used as the (never trained) classifier; baseline methods use it only to
    pin the feature dimension.
    """
    out = Path(out_dir)
    if seed < 0:
        raise InvalidParameterError(f"seed must be >= 0, got {seed}")
    if ms_metric not in METRICS:
        raise InvalidParameterError(f"ms_metric must be one of {METRICS}")
    if l2_lambda < 0:
        raise InvalidParameterError(f"lambda must be >= 0, got {l2_lambda}")
    total_classes = len(timeline.steps[-1].class_ids)
    if fc_template.num_outputs < total_classes:
        raise CapacityExceededError(
            f"classifier has {fc_template.num_outputs} outputs but the "
            f"timeline ends with {total_classes} classes"
        )
    _prepare_run_dir(out, force)

    method = timeline.method
    feature_dim = fc_template.dim
    fc = FixedClassifier(fc_template.prototypes, 0, fc_template.kind)
    mapping: dict = {}
    registry = ModelRegistry()
    digests: dict = {}
    manifest_steps = []

    ghat_set = ms_pairs = None
    if model_selection:
        ghat_set, ms_pairs = _ms_context(protocol, seed, ms_metric)
    prev_model: FeatureModel | None = None
    prev_head: np.ndarray | None = None
    prev_step_set: LabeledSet | None = None
    prev_ghat_gallery: FeatureGallery | None = None
    prev_self_ms: float | None = None

    for step_index, (step_set, config) in enumerate(
        zip(timeline.steps, timeline.configs), start=1
    ):
        new_classes = [int(c) for c in step_set.class_ids if int(c) not in mapping]
        for c in new_classes:
            mapping[c] = len(mapping)
        y = _mapped_labels(step_set, mapping)
        classes_total = len(mapping)
        if method is Method.CORES:
            fc = allocate_classes(fc, len(new_classes))

        selector = None
        if model_selection and step_index >= 2:
            selector = _StepSelector(
                protocol.query_set, ghat_set, ms_pairs, ms_metric,
                prev_ghat_gallery, prev_self_ms,
            )

        dims = [step_set.input_dim, *hidden_dims, feature_dim]
        shuffle_seed = derive_seed(seed, _TAG_SHUFFLE, step_index)
        head = None

        if method is Method.CORES:
            model = _init_backbone(config.init_mode, step_index, dims, seed, prev_model)
            train_epochs(model, fc, step_set.samples, y, config, shuffle_seed,
                         on_epoch=selector)
        else:
            if method is Method.IFT:
                if step_index == 1:
                    model = init_model(dims, derive_seed(seed, _TAG_INIT),
                                       InitMode.SAME_SEED)
                    head = _fresh_head(feature_dim, classes_total,
                                       derive_seed(seed, _TAG_HEAD, step_index))
                else:
                    model = init_model(prev_model.layer_dims, prev_model.seed,
                                       InitMode.FINE_TUNE, prev_model)
                    head = _expanded_head(prev_head, classes_total,
                                          derive_seed(seed, _TAG_HEAD, step_index))
            else:
                model = _init_backbone(config.init_mode, step_index, dims, seed,
                                       prev_model)
                head = _fresh_head(feature_dim, classes_total,
                                   derive_seed(seed, _TAG_HEAD, step_index))
            if selector is not None:
                selector.live_head = head

            old_model = old_mask = None
            lam = 0.0
            if method is Method.L2 and step_index >= 2:
                if step_set.source_rows is None or prev_step_set.source_rows is None:
                    raise InvalidParameterError(
                        "the l2 method needs source_rows provenance on the "
                        "timeline steps; build them with build_timeline"
                    )
                old_mask = np.isin(step_set.source_rows, prev_step_set.source_rows)
                old_model = prev_model
                lam = l2_lambda
            train_with_head(model, head, step_set.samples, y, config, shuffle_seed,
                            old_model=old_model, old_mask=old_mask, lam=lam,
                            on_epoch=selector)

        selected_epoch = None
        constraint_ok = None
        if selector is not None:
            selected_epoch, constraint_ok = select_compatible_epoch(
                selector.scores, selector.previous_self
            )
            if constraint_ok:
                model = selector.best_model
                head = selector.best_head if head is not None else None

        model_id = f"step{step_index}"
        step_rel = f"step{step_index}"
        checkpoint_rel = f"{step_rel}/model.json"
        query_rel = f"{step_rel}/query.gallery"
        gallery_rel = f"{step_rel}/gallery.gallery"
        checkpoint_path = out / checkpoint_rel
        checkpoint_path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(
            checkpoint_path, model,
            classifier=fc if method is Method.CORES else None,
            head=head, model_id=model_id,
        )
        digests[checkpoint_rel] = sha256_file(checkpoint_path)
        query_gallery = extract_gallery(model, fc_template, protocol.query_set,
                                        model_id)
        gallery_gallery = extract_gallery(model, fc_template, protocol.gallery_set,
                                          model_id)
        digests[query_rel] = write_gallery(out / query_rel, query_gallery)
        digests[gallery_rel] = write_gallery(out / gallery_rel, gallery_gallery)

        registry.append(RegistryEntry(
            step=step_index, model_id=model_id, method=method, model=model,
            classifier=fc if method is Method.CORES else None, head=head,
            checkpoint_path=checkpoint_path, selected_epoch=selected_epoch,
            ms_constraint_satisfied=constraint_ok,
        ))
        manifest_steps.append({
            "step": step_index,
            "model_id": model_id,
            "classes_total": classes_total,
            "classes_new": len(new_classes),
            "epochs": config.epochs,
            "checkpoint": checkpoint_rel,
            "query_gallery": query_rel,
            "gallery_gallery": gallery_rel,
            "selected_epoch": selected_epoch,
            "ms_constraint_satisfied": constraint_ok,
        })

        if model_selection:
            ghat_gallery = FeatureGallery(model_id, ghat_set.labels,
                                          model.forward(ghat_set.samples))
            own_query = FeatureGallery(model_id, protocol.query_set.labels,
                                       model.forward(protocol.query_set.samples))
            prev_self_ms = _ms_score(ms_metric, ms_pairs, own_query, ghat_gallery)
            prev_ghat_gallery = ghat_gallery
        prev_model, prev_head, prev_step_set = model, head, step_set

    manifest = {
        "format": "cores-run",
        "version": 1,
        "tool_version": __version__,
        "seed": int(seed),
        "method": method.value,
        "feature_dim": feature_dim,
        "hidden_dims": list(hidden_dims),
        "classifier": {
            "kind": fc_template.kind.value,
            "num_outputs": fc_template.num_outputs,
        },
        "model_selection": bool(model_selection),
        "l2_lambda": l2_lambda if method is Method.L2 else None,
        "eval": {
            "protocol_seed": protocol.seed,
            "n_query": protocol.query_set.num_samples,
            "n_gallery": protocol.gallery_set.num_samples,
            "num_classes": int(protocol.eval_set.num_classes),
            "n_pos": protocol.n_pos,
            "n_neg": protocol.n_neg,
        },
        "steps": manifest_steps,
        "digests": digests,
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    write_manifest(out, manifest)
    return RunResult(out_dir=out, registry=registry, manifest=manifest)


@dataclass(frozen=True)
class DriftReport:
    """Per-class cosine between two extractors' class centroids."""

    per_class: dict
    mean_cosine: float
    skipped: int


def centroid_drift(model_a: FeatureModel, model_b: FeatureModel,
                   probe_set: LabeledSet) -> DriftReport:
    """Cosine alignment of class centroids under two extractors.

    A mean near 1 means the second extractor kept each class region where
    the first one put it. Classes whose centroid has zero norm under either
    model are excluded and counted in ``skipped``.
    """
    feats_a = model_a.forward(probe_set.samples)
    feats_b = model_b.forward(probe_set.samples)
    per_class = {}
    skipped = 0
    for c in probe_set.class_ids:
        rows = np.flatnonzero(probe_set.labels == c)
        ca = feats_a[rows].mean(axis=0)
        cb = feats_b[rows].mean(axis=0)
        na, nb = np.linalg.norm(ca), np.linalg.norm(cb)
        if na == 0.0 or nb == 0.0:
            skipped += 1
            continue
        per_class[int(c)] = float(ca.dot(cb) / (na * nb))
    if not per_class:
        raise UndefinedDistanceError(
            "every class centroid is degenerate; drift is undefined"
        )
    return DriftReport(
        per_class=per_class,
        mean_cosine=float(np.mean(list(per_class.values()))),
        skipped=skipped,
    )
