"""Feed-forward feature extractor with explicit backprop and SGD.

The model is a plain MLP: ReLU on hidden layers, identity on the output
layer, so features live in an unbounded real vector space. When trained
against a :class:`~cores.polytope.FixedClassifier`, the loss is softmax
cross-entropy over *every* classifier output, allocated or not. Outputs that
are still reserved contribute to the softmax denominator only, which keeps
feature mass out of the directions held back for classes that arrive later.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import (
    FormatError,
    InvalidLabelError,
    InvalidParameterError,
    MissingArgumentError,
)
from .polytope import FixedClassifier, PolytopeKind


class InitMode(str, Enum):
    """How a step's model parameters come to life."""

    SAME_SEED = "same"
    FRESH_RANDOM = "random"
    FINE_TUNE = "finetune"


@dataclass(frozen=True)
class TrainConfig:
    """Hyper-parameters for one training run.

    ``lr_schedule`` is a tuple of (epoch, rate) pairs; each rate takes effect
    at the start of its epoch and stays until the next entry.
    """

    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    epochs: int = 30
    lr_schedule: tuple = ()
    init_mode: InitMode = InitMode.SAME_SEED

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise InvalidParameterError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.momentum < 0:
            raise InvalidParameterError(f"momentum must be >= 0, got {self.momentum}")
        if self.weight_decay < 0:
            raise InvalidParameterError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise InvalidParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise InvalidParameterError(f"epochs must be >= 1, got {self.epochs}")
        sched = tuple((int(e), float(r)) for e, r in self.lr_schedule)
        for epoch, rate in sched:
            if epoch < 0 or rate <= 0:
                raise InvalidParameterError(f"bad schedule entry ({epoch}, {rate})")
        object.__setattr__(self, "lr_schedule", sched)
        object.__setattr__(self, "init_mode", InitMode(self.init_mode))


class FeatureModel:
    """MLP feature extractor with parameters held as plain arrays.

    ``weights[i]`` has shape (layer_dims[i], layer_dims[i+1]); activations are
    row vectors, so a forward pass is ``a @ W + b`` layer by layer.
    """

    def __init__(self, layer_dims, weights, biases, seed: int, init_mode: InitMode):
        self.layer_dims = [int(d) for d in layer_dims]
        self.weights = list(weights)
        self.biases = list(biases)
        self.seed = int(seed)
        self.init_mode = InitMode(init_mode)
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise InvalidParameterError("parameter count does not match layer_dims")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expect = (self.layer_dims[i], self.layer_dims[i + 1])
            if w.shape != expect or b.shape != (expect[1],):
                raise InvalidParameterError(
                    f"layer {i} parameter shapes {w.shape}/{b.shape} do not match dims {expect}"
                )

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "FeatureModel":
        return FeatureModel(
            self.layer_dims,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.seed,
            self.init_mode,
        )

    def _check_inputs(self, inputs: np.ndarray) -> np.ndarray:
        x = np.asarray(inputs, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise InvalidParameterError(
                f"inputs must have shape (n, {self.input_dim}), got {x.shape}"
            )
        return x

    def forward(self, inputs: np.ndarray) -> np.ndarray:
        """Map inputs to features, shape (n, output_dim)."""
        return self.forward_cached(inputs)[0]

    def forward_cached(self, inputs: np.ndarray):
        """Forward pass that also returns every layer's post-activation.

        The returned list starts with the inputs themselves and ends with the
        features; it is what :func:`backprop` consumes.
        """
        a = self._check_inputs(inputs)
        activations = [a]
        last = self.num_layers - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w + b
            a = z if i == last else np.maximum(z, 0.0)
            activations.append(a)
        return activations[-1], activations


def init_model(
    layer_dims,
    seed: int,
    init_mode: InitMode = InitMode.SAME_SEED,
    previous_model: FeatureModel | None = None,
) -> FeatureModel:
    """Create model parameters for the given layer widths.

    Weights are drawn uniformly from +-sqrt(6 / (fan_in + fan_out)) per layer
    (one independent RNG stream per layer, split from ``seed``), biases start
    at zero. ``FINE_TUNE`` ignores the RNG entirely and clones
    ``previous_model``, which must exist and have identical layer widths.
    """
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2:
        raise InvalidParameterError("layer_dims needs at least input and output widths")
    if any(d < 1 for d in dims):
        raise InvalidParameterError(f"layer widths must be >= 1, got {dims}")
    mode = InitMode(init_mode)

    if mode is InitMode.FINE_TUNE:
        if previous_model is None:
            raise MissingArgumentError("fine-tune initialisation requires a previous model")
        if previous_model.layer_dims != dims:
            raise InvalidParameterError(
                f"fine-tune dims {dims} do not match previous model {previous_model.layer_dims}"
            )
        clone = previous_model.copy()
        clone.init_mode = mode
        return clone

    if seed < 0:
        raise InvalidParameterError(f"seed must be >= 0, got {seed}")
    streams = np.random.SeedSequence(int(seed)).spawn(len(dims) - 1)
    weights, biases = [], []
    for i, stream in enumerate(streams):
        rng = np.random.default_rng(stream)
        fan_in, fan_out = dims[i], dims[i + 1]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out, dtype=np.float64))
    return FeatureModel(dims, weights, biases, seed, mode)


def backprop(model: FeatureModel, activations, dfeatures: np.ndarray):
    """Propagate a feature-space gradient back to parameter gradients.

    Returns one (dW, db) pair per layer. ``activations`` must come from
    :meth:`FeatureModel.forward_cached` on the same inputs.
    """
    grads = [None] * model.num_layers
    delta = np.asarray(dfeatures, dtype=np.float64)
    for i in range(model.num_layers - 1, -1, -1):
        a_prev = activations[i]
        grads[i] = (a_prev.T @ delta, delta.sum(axis=0))
        if i > 0:
            # ReLU mask: post-activation > 0 iff pre-activation > 0.
            delta = (delta @ model.weights[i].T) * (activations[i] > 0.0)
    return grads


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over rows plus its gradient w.r.t. the logits."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    n, k = z.shape
    if y.shape != (n,):
        raise InvalidParameterError(f"labels must have shape ({n},), got {y.shape}")
    if n == 0:
        raise InvalidParameterError("need at least one row")
    if y.min() < 0 or y.max() >= k:
        raise InvalidLabelError(
            f"labels must lie in [0, {k}), got range [{y.min()}, {y.max()}]"
        )
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    denom = ez.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    logp = (z - zmax) - np.log(denom)
    loss = float(-logp[rows, y].mean())
    dlogits = ez / denom
    dlogits[rows, y] -= 1.0
    dlogits /= n
    return loss, dlogits


def cores_loss_and_grad(features: np.ndarray, labels: np.ndarray, classifier: FixedClassifier):
    """Softmax cross-entropy against every prototype column.

    Labels index allocated outputs only; the softmax denominator still runs
    over all ``num_outputs`` columns, so reserved outputs act as repulsive
    directions. Returns (mean loss, gradient w.r.t. the features).
    """
    f = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if f.ndim != 2 or f.shape[1] != classifier.dim:
        raise InvalidParameterError(
            f"features must have shape (n, {classifier.dim}), got {f.shape}"
        )
    if classifier.allocated < 1:
        raise InvalidLabelError("classifier has no allocated outputs to train against")
    if y.shape != (f.shape[0],):
        raise InvalidParameterError(f"labels must have shape ({f.shape[0]},), got {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= classifier.allocated):
        bad = y[(y < 0) | (y >= classifier.allocated)][0]
        raise InvalidLabelError(
            f"label {bad} outside the {classifier.allocated} allocated outputs"
        )
    logits = f @ classifier.prototypes
    loss, dlogits = softmax_cross_entropy(logits, y)
    dfeatures = dlogits @ classifier.prototypes.T
    return loss, dfeatures


@dataclass
class SgdState:
    """Momentum buffers matching a model's parameter list."""

    weight_velocity: list = field(default_factory=list)
    bias_velocity: list = field(default_factory=list)

    @classmethod
    def zeros_like(cls, model: FeatureModel) -> "SgdState":
        return cls(
            weight_velocity=[np.zeros_like(w) for w in model.weights],
            bias_velocity=[np.zeros_like(b) for b in model.biases],
        )


def sgd_step(model: FeatureModel, grads, config: TrainConfig, state: SgdState,
             lr: float | None = None) -> None:
    """One SGD update with momentum and coupled weight decay, in place.

    velocity <- momentum * velocity + (grad + weight_decay * param)
    param    <- param - lr * velocity
    """
    rate = config.learning_rate if lr is None else float(lr)
    if rate <= 0:
        raise InvalidParameterError(f"learning rate must be > 0, got {rate}")
    if len(grads) != model.num_layers:
        raise InvalidParameterError("gradient list does not match model layers")
    for i, (dw, db) in enumerate(grads):
        if dw.shape != model.weights[i].shape or db.shape != model.biases[i].shape:
            raise InvalidParameterError(f"gradient shapes at layer {i} do not match parameters")
        vw = state.weight_velocity[i]
        vb = state.bias_velocity[i]
        vw *= config.momentum
        vw += dw + config.weight_decay * model.weights[i]
        vb *= config.momentum
        vb += db + config.weight_decay * model.biases[i]
        model.weights[i] -= rate * vw
        model.biases[i] -= rate * vb


def schedule_rates(config: TrainConfig) -> list:
    """Resolve the per-epoch learning rate from config and schedule."""
    table = dict(config.lr_schedule)
    rates, rate = [], config.learning_rate
    for epoch in range(config.epochs):
        rate = table.get(epoch, rate)
        rates.append(rate)
    return rates


def train_epochs(
    model: FeatureModel,
    classifier: FixedClassifier,
    inputs: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig,
    seed: int,
    on_epoch=None,
) -> list:
    """Train ``model`` in place against the fixed prototypes.

    Each epoch shuffles with its own RNG stream derived from (seed, epoch),
    so a run is reproducible from the seed alone. ``on_epoch`` is called
    after every epoch as ``on_epoch(epoch_index, model, mean_loss)``; the
    model object it sees is live, so callers must copy if they keep it.
    Returns the list of per-epoch mean losses.
    """
    x = model._check_inputs(inputs)
    y = np.asarray(labels)
    if y.shape != (x.shape[0],):
        raise InvalidParameterError(f"labels must have shape ({x.shape[0]},), got {y.shape}")
    if x.shape[0] < 1:
        raise InvalidParameterError("training set is empty")
    if model.output_dim != classifier.dim:
        raise InvalidParameterError(
            f"model output dim {model.output_dim} does not match classifier dim {classifier.dim}"
        )
    if seed < 0:
        raise InvalidParameterError(f"seed must be >= 0, got {seed}")
    if y.size and (y.min() < 0 or y.max() >= classifier.allocated):
        raise InvalidLabelError(
            f"labels must lie in [0, {classifier.allocated}), got range [{y.min()}, {y.max()}]"
        )

    state = SgdState.zeros_like(model)
    rates = schedule_rates(config)
    n = x.shape[0]
    losses = []
    for epoch in range(config.epochs):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), epoch]))
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            rows = order[start:start + config.batch_size]
            feats, acts = model.forward_cached(x[rows])
            loss, dfeat = cores_loss_and_grad(feats, y[rows], classifier)
            sgd_step(model, backprop(model, acts, dfeat), config, state, lr=rates[epoch])
            total += loss * len(rows)
        mean_loss = total / n
        losses.append(mean_loss)
        if on_epoch is not None:
            on_epoch(epoch, model, mean_loss)
    return losses


# ---------------------------------------------------------------------------
# checkpoint serialisation

CHECKPOINT_FORMAT = "cores-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Checkpoint:
    """A model plus whatever classifier/head it was trained with."""

    model: FeatureModel
    classifier: FixedClassifier | None
    head: np.ndarray | None
    model_id: str | None


def save_checkpoint(
    path,
    model: FeatureModel,
    classifier: FixedClassifier | None = None,
    head: np.ndarray | None = None,
    model_id: str | None = None,
) -> None:
    """Write a self-describing JSON checkpoint.

    Matrices are stored flat in row-major order; the embedded classifier, if
    any, carries its kind, output count and allocation so the file fully
    reconstructs the training-time setup. A learnable head (used by the
    baseline trainers, never by the fixed-classifier path) is optional.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_id": model_id,
        "layer_dims": model.layer_dims,
        "seed": model.seed,
        "init_mode": model.init_mode.value,
        "weights": [w.ravel().tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
        "classifier": None,
        "head": None,
    }
    if classifier is not None:
        doc["classifier"] = {
            "kind": classifier.kind.value,
            "dim": classifier.dim,
            "num_outputs": classifier.num_outputs,
            "allocated": classifier.allocated,
            "prototypes": classifier.prototypes.ravel().tolist(),
        }
    if head is not None:
        h = np.asarray(head, dtype=np.float64)
        if h.ndim != 2 or h.shape[0] != model.output_dim:
            raise InvalidParameterError(
                f"head must have shape ({model.output_dim}, n), got {h.shape}"
            )
        doc["head"] = {"num_outputs": h.shape[1], "weights": h.ravel().tolist()}
    text = json.dumps(doc, sort_keys=True, indent=1)
    Path(path).write_text(text + "\n")


def load_checkpoint(path) -> Checkpoint:
    """Read a checkpoint written by :func:`save_checkpoint`."""
    p = Path(path)
    try:
        doc = json.loads(p.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{p}: not a readable checkpoint ({exc})") from exc
    try:
        if doc["format"] != CHECKPOINT_FORMAT:
            raise FormatError(f"{p}: format is {doc['format']!r}, expected {CHECKPOINT_FORMAT!r}")
        if doc["version"] != CHECKPOINT_VERSION:
            raise FormatError(f"{p}: unsupported checkpoint version {doc['version']}")
        dims = [int(d) for d in doc["layer_dims"]]
        weights = [
            np.asarray(flat, dtype=np.float64).reshape(dims[i], dims[i + 1])
            for i, flat in enumerate(doc["weights"])
        ]
        biases = [np.asarray(b, dtype=np.float64) for b in doc["biases"]]
        model = FeatureModel(dims, weights, biases, doc["seed"], InitMode(doc["init_mode"]))
        classifier = None
        if doc.get("classifier") is not None:
            c = doc["classifier"]
            proto = np.asarray(c["prototypes"], dtype=np.float64).reshape(
                c["dim"], c["num_outputs"]
            )
            classifier = FixedClassifier(proto, int(c["allocated"]), PolytopeKind(c["kind"]))
        head = None
        if doc.get("head") is not None:
            h = doc["head"]
            head = np.asarray(h["weights"], dtype=np.float64).reshape(
                model.output_dim, int(h["num_outputs"])
            )
        return Checkpoint(model=model, classifier=classifier, head=head,
                          model_id=doc.get("model_id"))
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"{p}: malformed checkpoint ({exc})") from exc
