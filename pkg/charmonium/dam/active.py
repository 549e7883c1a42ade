"""One-shot query strategies that spend the whole labeling budget before adaptation."""
from __future__ import annotations

import logging
import math
from typing import Callable, Dict, List, NamedTuple, Optional, Tuple

import numpy
import numpy.typing

from . import diffcore, models
from .errors import InvalidInputError, InvalidParameterError
from .models import ClassifierModel
from .util import FloatArray, IntArray

logger = logging.getLogger("charmonium.dam")

Strategy = Callable[[ClassifierModel, FloatArray, int, int], IntArray]

_strategies: Dict[str, Strategy] = {}


class QueryResult(NamedTuple):
    indices: Tuple[int, ...]
    strategy_name: str
    budget_used: int


def register_strategy(name: str) -> Callable[[Strategy], Strategy]:
    def decorator(func: Strategy) -> Strategy:
        _strategies[name] = func
        return func

    return decorator


def available_strategies() -> List[str]:
    return sorted(_strategies)


def budget_size(rho: float, n: int) -> int:
    """``floor(rho * n)``, but at least one sample.

    >>> budget_size(0.05, 1000)
    50
    >>> budget_size(0.05, 10)
    1

    """
    if not 0 < rho < 1:
        raise InvalidParameterError(f"labeling ratio must lie in (0, 1), got {rho}")
    # The epsilon absorbs representation error, e.g. 0.29 * 100 == 28.999999999999996.
    return max(1, math.floor(rho * n + 1e-9))


def _top_by_score(scores: FloatArray, budget: int) -> IntArray:
    """Indices of the ``budget`` largest scores; ties go to the smallest index."""
    order = numpy.lexsort((numpy.arange(scores.size), -scores))
    return order[:budget].astype(numpy.int64)


def select_by_entropy(probs: numpy.typing.ArrayLike, budget: int) -> IntArray:
    """The ``budget`` predictions with the highest entropy."""
    return _top_by_score(diffcore.entropy_rows(probs), budget)


def select_by_margin(probs: numpy.typing.ArrayLike, budget: int) -> IntArray:
    """The ``budget`` predictions with the smallest top-1 minus top-2 gap."""
    ordered = numpy.sort(numpy.asarray(probs, dtype=numpy.float64), axis=1)
    return _top_by_score(-(ordered[:, -1] - ordered[:, -2]), budget)


@register_strategy("random")
def _(source: ClassifierModel, x: FloatArray, budget: int, seed: int) -> IntArray:
    rng = numpy.random.default_rng([seed, 30])
    return rng.choice(x.shape[0], size=budget, replace=False).astype(numpy.int64)


@register_strategy("entropy")
def _(source: ClassifierModel, x: FloatArray, budget: int, seed: int) -> IntArray:
    return select_by_entropy(models.predict(source, x), budget)


@register_strategy("margin")
def _(source: ClassifierModel, x: FloatArray, budget: int, seed: int) -> IntArray:
    return select_by_margin(models.predict(source, x), budget)


@register_strategy("kcenter")
def _(source: ClassifierModel, x: FloatArray, budget: int, seed: int) -> IntArray:
    return kcenter_greedy(models.penultimate_features(source, x), budget, seed)


def kcenter_greedy(features: numpy.typing.ArrayLike, budget: int, seed: int = 0) -> IntArray:
    """Greedy k-center selection in Euclidean space.

    The first center is the point farthest from the centroid; each next
    center is the point farthest from its nearest chosen center. Ties go to
    the smallest index. ``seed`` is accepted for interface uniformity; the
    procedure is deterministic.

    """
    points = numpy.atleast_2d(numpy.asarray(features, dtype=numpy.float64))
    n = points.shape[0]
    if n == 0 or points.size == 0:
        raise InvalidInputError("k-center selection needs a non-empty pool")
    if not 0 <= budget <= n:
        raise InvalidParameterError(f"budget {budget} must lie in [0, {n}]")
    chosen: List[int] = []
    scores = numpy.linalg.norm(points - points.mean(axis=0), axis=1)
    min_dist: Optional[FloatArray] = None
    for _ in range(budget):
        # np.argmax returns the first maximum, which is the tie rule.
        center = int(numpy.argmax(scores))
        chosen.append(center)
        dist = numpy.linalg.norm(points - points[center], axis=1)
        min_dist = dist if min_dist is None else numpy.minimum(min_dist, dist)
        scores = min_dist.copy()
        scores[chosen] = -numpy.inf
    return numpy.array(chosen, dtype=numpy.int64)


def query(
    strategy: str, source: ClassifierModel, target_x: numpy.typing.ArrayLike, rho: float, seed: int = 0
) -> QueryResult:
    """Select ``max(1, floor(rho * n))`` target indices using only the raw source model."""
    if strategy not in _strategies:
        raise InvalidParameterError(
            f"unknown query strategy {strategy!r}; expected one of {available_strategies()}"
        )
    x = numpy.atleast_2d(numpy.asarray(target_x, dtype=numpy.float64))
    budget = budget_size(rho, x.shape[0])
    indices = _strategies[strategy](source, x, budget, seed)
    logger.info("query %s selected %d of %d target samples", strategy, budget, x.shape[0])
    return QueryResult(tuple(int(idx) for idx in indices), strategy, budget)
