from typing import List

import numpy
import numpy.typing
import pytest
from dam_test_cases import random_model

from charmonium.dam import active
from charmonium.dam.errors import InvalidInputError, InvalidParameterError


@pytest.mark.parametrize("rho,n,expected", [(0.05, 1000, 50), (0.05, 10, 1), (0.29, 100, 29), (0.5, 3, 1)])
def test_budget_size(rho: float, n: int, expected: int) -> None:
    assert active.budget_size(rho, n) == expected


@pytest.mark.parametrize("rho", [0.0, 1.0, -0.1])
def test_budget_rejects_ratio(rho: float) -> None:
    with pytest.raises(InvalidParameterError):
        active.budget_size(rho, 100)


def test_entropy_picks_most_uncertain() -> None:
    probs = [[0.9, 0.1], [0.5, 0.5], [0.7, 0.3]]
    assert active.select_by_entropy(probs, 1).tolist() == [1]
    assert active.select_by_entropy(probs, 2).tolist() == [1, 2]


def test_margin_picks_smallest_gap() -> None:
    probs = [[0.6, 0.3, 0.1], [0.4, 0.35, 0.25], [0.98, 0.01, 0.01]]
    assert active.select_by_margin(probs, 1).tolist() == [1]


def test_uncertainty_ties_go_to_smallest_index() -> None:
    probs = numpy.full((5, 2), 0.5)
    assert active.select_by_entropy(probs, 3).tolist() == [0, 1, 2]


def test_kcenter_square() -> None:
    square = numpy.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    chosen = active.kcenter_greedy(square, 2).tolist()
    assert chosen == [0, 3]


def test_kcenter_identical_points() -> None:
    assert active.kcenter_greedy(numpy.ones((6, 3)), 4).tolist() == [0, 1, 2, 3]


def test_kcenter_full_budget() -> None:
    points = numpy.random.default_rng(0).normal(size=(7, 2))
    assert sorted(active.kcenter_greedy(points, 7).tolist()) == list(range(7))


def test_kcenter_rejects_empty() -> None:
    with pytest.raises(InvalidInputError):
        active.kcenter_greedy(numpy.zeros((0, 3)), 1)
    with pytest.raises(InvalidParameterError):
        active.kcenter_greedy(numpy.zeros((2, 3)), 3)


def reference_kcenter(points: numpy.typing.NDArray[numpy.float64], budget: int) -> List[int]:
    centroid = points.mean(axis=0)
    first = max(range(len(points)), key=lambda i: (float(numpy.linalg.norm(points[i] - centroid)), -i))
    chosen = [first]
    while len(chosen) < budget:
        def gap(i: int) -> float:
            return min(float(numpy.linalg.norm(points[i] - points[j])) for j in chosen)

        candidates = [i for i in range(len(points)) if i not in chosen]
        chosen.append(max(candidates, key=lambda i: (gap(i), -i)))
    return chosen


@pytest.mark.parametrize("seed", range(200))
def test_kcenter_matches_reference(seed: int) -> None:
    rng = numpy.random.default_rng(seed)
    points = rng.normal(size=(int(rng.integers(2, 65)), int(rng.integers(1, 5))))
    budget = int(rng.integers(1, min(8, points.shape[0]) + 1))
    assert active.kcenter_greedy(points, budget).tolist() == reference_kcenter(points, budget)


@pytest.mark.parametrize("strategy", ["random", "entropy", "margin", "kcenter"])
def test_query_spends_budget(strategy: str) -> None:
    model = random_model()
    x = numpy.random.default_rng(1).normal(size=(40, model.dim))
    result = active.query(strategy, model, x, rho=0.1, seed=3)
    assert result.budget_used == 4
    assert len(set(result.indices)) == 4
    assert all(0 <= idx < 40 for idx in result.indices)
    assert result.strategy_name == strategy
    assert active.query(strategy, model, x, rho=0.1, seed=3) == result


def test_unknown_strategy() -> None:
    with pytest.raises(InvalidParameterError):
        active.query("oracle", random_model(), numpy.zeros((4, 3)), rho=0.5)


def test_available_strategies() -> None:
    assert active.available_strategies() == ["entropy", "kcenter", "margin", "random"]
