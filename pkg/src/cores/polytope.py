"""Fixed regular-polytope classifiers.

A classifier here is a matrix of prototype vectors, one column per output,
placed on the vertices of a regular polytope. The matrix is created once and
never trained; capacity for classes that do not exist yet is reserved up
front and handed out through :func:`allocate_classes`.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import CapacityExceededError, InvalidParameterError


class PolytopeKind(str, Enum):
    """Geometry used to place prototype vectors."""

    D_SIMPLEX = "d-simplex"
    POLYGON_2D = "polygon-2d"


@dataclass(frozen=True)
class FixedClassifier:
    """Non-trainable classifier with one prototype column per output.

    ``prototypes`` has shape (d, K): column j is the prototype of output j.
    ``allocated`` counts the outputs currently assigned to concrete classes;
    the remaining ``num_outputs - allocated`` columns are reserved for classes
    that may appear in later training steps. Prototype values never change
    after construction.
    """

    prototypes: np.ndarray
    allocated: int
    kind: PolytopeKind

    def __post_init__(self):
        proto = np.ascontiguousarray(np.asarray(self.prototypes, dtype=np.float64))
        if proto.ndim != 2:
            raise InvalidParameterError("prototype matrix must be 2-D (dim x outputs)")
        if proto.shape[0] < 1 or proto.shape[1] < 2:
            raise InvalidParameterError(
                f"prototype matrix needs >= 1 dimension and >= 2 outputs, got shape {proto.shape}"
            )
        proto.setflags(write=False)
        object.__setattr__(self, "prototypes", proto)
        if not isinstance(self.allocated, (int, np.integer)):
            raise InvalidParameterError("allocated must be an integer")
        if not 0 <= self.allocated <= self.num_outputs:
            raise InvalidParameterError(
                f"allocated must lie in [0, {self.num_outputs}], got {self.allocated}"
            )
        object.__setattr__(self, "kind", PolytopeKind(self.kind))

    @property
    def dim(self) -> int:
        return self.prototypes.shape[0]

    @property
    def num_outputs(self) -> int:
        return self.prototypes.shape[1]

    @property
    def free_outputs(self) -> int:
        return self.num_outputs - self.allocated


def dsimplex_prototypes(num_outputs: int) -> FixedClassifier:
    """Build the K-vertex regular simplex in K-1 dimensions.

    The first K-1 columns are the standard basis vectors; the final column is
    the constant vector with every coordinate equal to (1 - sqrt(K))/(K - 1).
    All vertices are then pairwise equidistant (distance sqrt(2)), and after
    centering on the vertex mean every pairwise cosine equals -1/(K-1).
    """
    if num_outputs < 2:
        raise InvalidParameterError(f"simplex needs >= 2 outputs, got {num_outputs}")
    k = int(num_outputs)
    d = k - 1
    proto = np.zeros((d, k), dtype=np.float64)
    proto[:, :d] = np.eye(d)
    proto[:, d] = (1.0 - math.sqrt(k)) / (k - 1)
    return FixedClassifier(prototypes=proto, allocated=0, kind=PolytopeKind.D_SIMPLEX)


def polygon_prototypes(num_outputs: int) -> FixedClassifier:
    """Build K unit vectors at angles 2*pi*j/K in the plane.

    Mainly useful for two-dimensional feature-space visualisation; unlike the
    simplex, pairwise angles are not all equal for K > 3.
    """
    if num_outputs < 2:
        raise InvalidParameterError(f"polygon needs >= 2 outputs, got {num_outputs}")
    angles = 2.0 * np.pi * np.arange(num_outputs, dtype=np.float64) / num_outputs
    proto = np.vstack([np.cos(angles), np.sin(angles)])
    return FixedClassifier(prototypes=proto, allocated=0, kind=PolytopeKind.POLYGON_2D)


def allocate_classes(classifier: FixedClassifier, count: int) -> FixedClassifier:
    """Reserve ``count`` further outputs for concrete classes.

    Returns a new classifier sharing the same prototype matrix; only the
    allocation counter moves. Exceeding the output count is an error: the
    polytope cannot grow after construction.
    """
    if count < 0:
        raise InvalidParameterError(f"allocation count must be >= 0, got {count}")
    new_total = classifier.allocated + count
    if new_total > classifier.num_outputs:
        raise CapacityExceededError(
            f"cannot allocate {count} more classes: {classifier.allocated} of "
            f"{classifier.num_outputs} outputs already in use"
        )
    return dataclasses.replace(classifier, allocated=new_total)


@dataclass(frozen=True)
class GeometryReport:
    """Pairwise geometry summary over all prototype columns."""

    num_outputs: int
    kind: PolytopeKind
    min_distance: float
    max_distance: float
    min_cosine: float
    max_cosine: float
    centered_min_cosine: float
    centered_max_cosine: float


def pairwise_geometry_report(classifier: FixedClassifier) -> GeometryReport:
    """Measure pairwise distances and cosines between prototypes.

    Cosines are reported twice: on the raw columns (what the logits see) and
    on columns centered on the vertex mean and re-normalised, which is the
    frame where simplex vertices achieve cosine -1/(K-1).
    """
    proto = classifier.prototypes
    k = classifier.num_outputs
    gram = proto.T @ proto
    sq = np.diag(gram)
    dist_sq = sq[:, None] + sq[None, :] - 2.0 * gram
    np.fill_diagonal(dist_sq, 0.0)
    dist = np.sqrt(np.clip(dist_sq, 0.0, None))

    norms = np.sqrt(sq)
    cos = gram / np.outer(norms, norms)

    centered = proto - proto.mean(axis=1, keepdims=True)
    cnorms = np.linalg.norm(centered, axis=0)
    ccos = (centered.T @ centered) / np.outer(cnorms, cnorms)

    off = ~np.eye(k, dtype=bool)
    return GeometryReport(
        num_outputs=k,
        kind=classifier.kind,
        min_distance=float(dist[off].min()),
        max_distance=float(dist[off].max()),
        min_cosine=float(cos[off].min()),
        max_cosine=float(cos[off].max()),
        centered_min_cosine=float(ccos[off].min()),
        centered_max_cosine=float(ccos[off].max()),
    )
