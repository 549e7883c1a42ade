"""Seeded synthetic domains: a labeled source, a shifted target and a broad foundation corpus."""
from __future__ import annotations

import csv
import logging
import math
import pathlib
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Tuple

import numpy
import numpy.typing

from .config import Config
from .errors import (
    BudgetExhaustedError,
    DatasetParseError,
    DatasetValidationError,
    DuplicateQueryError,
    InvalidDataError,
    InvalidParameterError,
    ShapeError,
)
from .util import FloatArray, IntArray, PathLike

logger = logging.getLogger("charmonium.dam")

FOUNDATION_VARIANCE = 3.0


@dataclass
class ShiftSpec(Config):
    rotation_angle: float = 0.0
    # empty means no translation
    translation: Tuple[float, ...] = ()
    scale: float = 1.0
    label_noise: float = 0.0
    class_prior_skew: float = 0.0

    tuple_fields = frozenset({"translation"})

    def validate(self) -> None:
        if not self.scale > 0:
            raise InvalidParameterError(f"shift scale must be positive, got {self.scale}")
        if not 0 <= self.label_noise < 0.5:
            raise InvalidParameterError(f"label noise must lie in [0, 0.5), got {self.label_noise}")
        if self.class_prior_skew < 0:
            raise InvalidParameterError(f"class prior skew must be >= 0, got {self.class_prior_skew}")
        if not all(math.isfinite(val) for val in (self.rotation_angle, *self.translation)):
            raise InvalidParameterError("shift parameters must be finite")


@dataclass(frozen=True, eq=False)
class DomainDataset:
    samples: FloatArray
    labels: IntArray
    num_classes: int
    domain_tag: str
    seed: int

    def __post_init__(self) -> None:
        samples = numpy.array(self.samples, dtype=numpy.float64)
        labels = numpy.array(self.labels, dtype=numpy.int64)
        if samples.ndim != 2 or labels.shape != (samples.shape[0],):
            raise ShapeError(f"{samples.shape[0]} samples but labels of shape {labels.shape}")
        if numpy.any(labels < 0) or numpy.any(labels >= self.num_classes):
            row = int(numpy.flatnonzero((labels < 0) | (labels >= self.num_classes))[0])
            raise DatasetValidationError(f"label {labels[row]} outside [0, {self.num_classes})", row)
        missing = sorted(set(range(self.num_classes)) - set(labels.tolist()))
        if missing:
            raise InvalidDataError(f"{self.domain_tag}: classes {missing} have no samples")
        samples.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "labels", labels)

    @property
    def size(self) -> int:
        return int(self.samples.shape[0])

    @property
    def dim(self) -> int:
        return int(self.samples.shape[1])

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, DomainDataset)
            and self.num_classes == other.num_classes
            and self.domain_tag == other.domain_tag
            and self.seed == other.seed
            and numpy.array_equal(self.samples, other.samples)
            and numpy.array_equal(self.labels, other.labels)
        )


class DomainPair(NamedTuple):
    source: DomainDataset
    target: DomainDataset
    foundation: DomainDataset


class Mixture(NamedTuple):
    means: FloatArray
    variance: float
    priors: FloatArray


def class_means(classes: int, dim: int, separation: float = 3.0) -> FloatArray:
    """Simplex corners ``separation * e_k`` when dim >= classes, else a circle in dims (0, 1)."""
    means = numpy.zeros((classes, dim))
    if dim >= classes:
        means[numpy.arange(classes), numpy.arange(classes)] = separation
    else:
        angles = 2 * numpy.pi * numpy.arange(classes) / classes
        means[:, 0] = separation * numpy.cos(angles)
        means[:, 1] = separation * numpy.sin(angles)
    return means


def class_priors(classes: int, skew: float) -> FloatArray:
    weights = numpy.exp(-skew * numpy.arange(classes) / (classes - 1))
    return weights / weights.sum()


def rotation_matrix(dim: int, angle: float) -> FloatArray:
    """Rotate every coordinate pair (0, 1), (2, 3), ... by ``angle``; an odd last axis is fixed."""
    ret = numpy.eye(dim)
    cos, sin = math.cos(angle), math.sin(angle)
    for axis in range(0, dim - 1, 2):
        ret[axis, axis] = cos
        ret[axis, axis + 1] = -sin
        ret[axis + 1, axis] = sin
        ret[axis + 1, axis + 1] = cos
    return ret


def _translation(shift: ShiftSpec, dim: int) -> FloatArray:
    if not shift.translation:
        return numpy.zeros(dim)
    if len(shift.translation) != dim:
        raise ShapeError(f"translation has {len(shift.translation)} entries, expected {dim}")
    return numpy.array(shift.translation, dtype=numpy.float64)


def apply_shift(x: numpy.typing.ArrayLike, shift: ShiftSpec, center: numpy.typing.ArrayLike) -> FloatArray:
    """x' = scale * R (x - center) + center + translation, applied row-wise."""
    points = numpy.atleast_2d(numpy.asarray(x, dtype=numpy.float64))
    dim = points.shape[1]
    rot = rotation_matrix(dim, shift.rotation_angle)
    centered = points - numpy.asarray(center, dtype=numpy.float64)
    return shift.scale * centered @ rot.T + center + _translation(shift, dim)


def source_mixture(classes: int, dim: int, separation: float = 3.0) -> Mixture:
    return Mixture(class_means(classes, dim, separation), 1.0, numpy.full(classes, 1.0 / classes))


def target_mixture(classes: int, dim: int, shift: ShiftSpec, separation: float = 3.0) -> Mixture:
    means = class_means(classes, dim, separation)
    shifted = apply_shift(means, shift, means.mean(axis=0))
    return Mixture(shifted, shift.scale**2, class_priors(classes, shift.class_prior_skew))


def bayes_classify(x: numpy.typing.ArrayLike, mixture: Mixture) -> IntArray:
    """Bayes decision for an isotropic Gaussian mixture; ties go to the smallest class."""
    points = numpy.atleast_2d(numpy.asarray(x, dtype=numpy.float64))
    sq_dist = ((points[:, None, :] - mixture.means[None, :, :]) ** 2).sum(axis=-1)
    scores = numpy.log(mixture.priors)[None, :] - sq_dist / (2 * mixture.variance)
    return numpy.argmax(scores, axis=1).astype(numpy.int64)


def stratified_counts(total: int, priors: FloatArray) -> IntArray:
    """Largest-remainder allocation of ``total`` samples with at least one per class."""
    raw = total * priors
    counts = numpy.floor(raw).astype(numpy.int64)
    remainder = total - int(counts.sum())
    order = numpy.lexsort((numpy.arange(priors.size), -(raw - counts)))
    counts[order[:remainder]] += 1
    while numpy.any(counts == 0):
        counts[int(numpy.argmax(counts))] -= 1
        counts[int(numpy.argmin(counts))] += 1
    return counts


def _sample_mixture(
    rng: numpy.random.Generator, means: FloatArray, variance: float, counts: IntArray
) -> Tuple[FloatArray, IntArray]:
    labels = numpy.repeat(numpy.arange(means.shape[0]), counts)
    samples = means[labels] + math.sqrt(variance) * rng.standard_normal((labels.size, means.shape[1]))
    order = rng.permutation(labels.size)
    return samples[order], labels[order]


def generate_domain_pair(
    classes: int,
    dim: int,
    n_source: int,
    n_target: int,
    shift: ShiftSpec,
    seed: int,
    n_foundation: Optional[int] = None,
    separation: float = 3.0,
) -> DomainPair:
    """Draw source, shifted target and foundation corpus from one seeded mixture.

    Label noise touches only the source; target labels stay clean for the
    oracle and for evaluation.

    """
    if classes < 2 or dim < 2:
        raise InvalidParameterError(f"need at least 2 classes and 2 dims, got C={classes}, d={dim}")
    if n_foundation is None:
        n_foundation = n_source
    for name, count in (("n_source", n_source), ("n_target", n_target), ("n_foundation", n_foundation)):
        if count < 10 * classes:
            raise InvalidParameterError(f"{name}={count} is below 10 samples per class")
    means = class_means(classes, dim, separation)
    uniform = numpy.full(classes, 1.0 / classes)

    rng = numpy.random.default_rng([seed, 0])
    source_x, source_y = _sample_mixture(rng, means, 1.0, stratified_counts(n_source, uniform))
    if shift.label_noise > 0:
        flip = rng.random(source_y.size) < shift.label_noise
        offsets = rng.integers(1, classes, size=source_y.size)
        source_y = numpy.where(flip, (source_y + offsets) % classes, source_y)

    rng = numpy.random.default_rng([seed, 1])
    priors = class_priors(classes, shift.class_prior_skew)
    target_x, target_y = _sample_mixture(rng, means, 1.0, stratified_counts(n_target, priors))
    target_x = apply_shift(target_x, shift, means.mean(axis=0))

    rng = numpy.random.default_rng([seed, 2])
    foundation_x, foundation_y = _sample_mixture(
        rng, means, FOUNDATION_VARIANCE, stratified_counts(n_foundation, uniform)
    )
    logger.debug(
        "generated C=%d d=%d source=%d target=%d foundation=%d seed=%d",
        classes, dim, n_source, n_target, n_foundation, seed,
    )
    return DomainPair(
        DomainDataset(source_x, source_y, classes, "source", seed),
        DomainDataset(target_x, target_y, classes, "target", seed),
        DomainDataset(foundation_x, foundation_y, classes, "foundation", seed),
    )


class Oracle:
    """Reveals ground-truth labels one index at a time, at most ``budget`` times."""

    def __init__(self, hidden_labels: numpy.typing.ArrayLike, budget: int) -> None:
        self.__hidden_labels = tuple(int(label) for label in numpy.asarray(hidden_labels))
        self.budget = budget
        self._query_log: List[int] = []

    @property
    def query_log(self) -> Tuple[int, ...]:
        return tuple(self._query_log)

    @property
    def size(self) -> int:
        return len(self.__hidden_labels)

    def query(self, index: int) -> int:
        if not 0 <= index < len(self.__hidden_labels):
            raise IndexError(f"index {index} outside [0, {len(self.__hidden_labels)})")
        if index in self._query_log:
            raise DuplicateQueryError(f"index {index} was already queried")
        if len(self._query_log) >= self.budget:
            raise BudgetExhaustedError(f"labeling budget of {self.budget} is exhausted")
        self._query_log.append(index)
        return self.__hidden_labels[index]


def make_oracle(ds: DomainDataset, budget: int) -> Oracle:
    return Oracle(ds.labels, budget)


def oracle_label(oracle: Oracle, index: int) -> int:
    return oracle.query(index)


def save_dataset(ds: DomainDataset, path: PathLike) -> None:
    """Write ``C,d,n,domain_tag,seed`` then one ``label,f_0,...,f_{d-1}`` row per sample."""
    if "," in ds.domain_tag or "\n" in ds.domain_tag:
        raise InvalidParameterError(f"domain tag {ds.domain_tag!r} cannot contain commas or newlines")
    lines = [f"{ds.num_classes},{ds.dim},{ds.size},{ds.domain_tag},{ds.seed}"]
    for label, row in zip(ds.labels.tolist(), ds.samples.tolist()):
        lines.append(",".join([str(label), *(repr(value) for value in row)]))
    pathlib.Path(path).write_text("\n".join(lines) + "\n")


def _parse_int(text: str, line: int, field: int) -> int:
    try:
        return int(text)
    except ValueError as exc:
        raise DatasetParseError(f"expected an integer, got {text!r}", line, field) from exc


def load_dataset(path: PathLike) -> DomainDataset:
    with pathlib.Path(path).open(newline="") as handle:
        rows = list(csv.reader(handle))
    if not rows:
        raise DatasetParseError("file is empty", 1)
    header = rows[0]
    if len(header) != 5:
        raise DatasetParseError(f"header needs 5 fields (C,d,n,domain_tag,seed), got {len(header)}", 1)
    classes = _parse_int(header[0], 1, 1)
    dim = _parse_int(header[1], 1, 2)
    count = _parse_int(header[2], 1, 3)
    domain_tag = header[3]
    seed = _parse_int(header[4], 1, 5)
    body = rows[1:]
    if len(body) != count:
        raise DatasetParseError(f"expected {count} sample rows, found {len(body)}", len(body) + 2)
    samples = numpy.empty((count, dim))
    labels = numpy.empty(count, dtype=numpy.int64)
    for row_idx, row in enumerate(body):
        line = row_idx + 2
        if len(row) != dim + 1:
            raise DatasetParseError(f"expected {dim + 1} fields, got {len(row)}", line)
        labels[row_idx] = _parse_int(row[0], line, 1)
        if not 0 <= labels[row_idx] < classes:
            raise DatasetValidationError(f"label {labels[row_idx]} outside [0, {classes})", row_idx)
        for col, text in enumerate(row[1:]):
            try:
                samples[row_idx, col] = float(text)
            except ValueError as exc:
                raise DatasetParseError(f"expected a float, got {text!r}", line, col + 2) from exc
    return DomainDataset(samples, labels, classes, domain_tag, seed)
