import logging
import math
from typing import List, Tuple

import numpy
import numpy.typing
import pytest

from charmonium.dam import diffcore
from charmonium.dam.errors import InvalidInputError, InvalidParameterError, NumericError, ShapeError


def test_softmax_symmetric() -> None:
    numpy.testing.assert_allclose(diffcore.softmax([0.0, 0.0, 0.0]), [1 / 3, 1 / 3, 1 / 3], rtol=0, atol=1e-15)


def test_softmax_hard_limit() -> None:
    numpy.testing.assert_allclose(diffcore.softmax([1.0, 0.0], tau=1e-8), [1.0, 0.0], rtol=0, atol=1e-12)


def test_softmax_values() -> None:
    exps = [math.exp(val) for val in (1.0, 2.0, 3.0)]
    expected = [val / math.fsum(exps) for val in exps]
    numpy.testing.assert_allclose(diffcore.softmax([1.0, 2.0, 3.0]), expected, rtol=1e-14)


def test_softmax_large_logits() -> None:
    probs = diffcore.softmax([1000.0, 999.0])
    assert numpy.all(numpy.isfinite(probs))
    assert probs.sum() == pytest.approx(1.0)


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_softmax_rejects_temperature(tau: float) -> None:
    with pytest.raises(InvalidParameterError):
        diffcore.softmax([1.0, 2.0], tau)


def test_softmax_rejects_non_finite() -> None:
    with pytest.raises(InvalidInputError):
        diffcore.softmax([1.0, math.nan])


def test_log_softmax_matches_log_of_softmax() -> None:
    logits = numpy.random.default_rng(0).normal(size=(5, 4))
    numpy.testing.assert_allclose(diffcore.log_softmax(logits, 0.7), numpy.log(diffcore.softmax(logits, 0.7)), atol=1e-12)


@pytest.mark.parametrize(
    "target,pred,expected",
    [
        ([1.0, 0.0], [1.0, 0.0], 0.0),
        ([0.0, 1.0, 0.0, 0.0], [0.25, 0.25, 0.25, 0.25], math.log(4)),
        ([0.5, 0.5], [0.9, 0.1], -(0.5 * math.log(0.9) + 0.5 * math.log(0.1))),
    ],
)
def test_cross_entropy(target: List[float], pred: List[float], expected: float) -> None:
    assert diffcore.cross_entropy(target, pred) == pytest.approx(expected, abs=1e-14)


def test_cross_entropy_shape_mismatch() -> None:
    with pytest.raises(ShapeError):
        diffcore.cross_entropy([1.0, 0.0], [0.5, 0.25, 0.25])


@pytest.mark.parametrize(
    "probs,expected",
    [
        ([0.25] * 4, math.log(4)),
        ([0.0, 1.0, 0.0], 0.0),
        ([0.7, 0.2, 0.1], -(0.7 * math.log(0.7) + 0.2 * math.log(0.2) + 0.1 * math.log(0.1))),
    ],
)
def test_entropy(probs: List[float], expected: float) -> None:
    assert diffcore.entropy(probs) == pytest.approx(expected, abs=1e-14)


@pytest.mark.parametrize(
    "a,b,expected",
    [
        ([3.0, -1.0], [3.0, -1.0], 1.0),
        ([1.0, 0.0], [0.0, 1.0], 0.0),
        ([1.0, 2.0], [3.0, 4.0], 11 / math.sqrt(5 * 25)),
    ],
)
def test_cosine_sim(a: List[float], b: List[float], expected: float) -> None:
    assert diffcore.cosine_sim(a, b) == pytest.approx(expected, abs=1e-15)


def test_cosine_sim_zero_vector() -> None:
    with pytest.raises(InvalidInputError):
        diffcore.cosine_sim([0.0, 0.0], [1.0, 0.0])


@pytest.mark.parametrize(
    "p,q,expected",
    [
        ([0.3, 0.7], [0.3, 0.7], 0.0),
        ([1.0, 0.0, 0.0], [1 / 3, 1 / 3, 1 / 3], math.log(3)),
        ([0.6, 0.4], [0.5, 0.5], 0.6 * math.log(1.2) + 0.4 * math.log(0.8)),
    ],
)
def test_kl_divergence(p: List[float], q: List[float], expected: float) -> None:
    assert diffcore.kl_divergence(p, q) == pytest.approx(expected, abs=1e-14)


def test_normalize_zero() -> None:
    with pytest.raises(InvalidInputError):
        diffcore.normalize([0.0, 0.0])
    numpy.testing.assert_allclose(numpy.linalg.norm(diffcore.normalize_rows([[3.0, 4.0], [1.0, 1.0]]), axis=1), 1.0)


def test_one_hot() -> None:
    numpy.testing.assert_array_equal(diffcore.one_hot([2, 0], 3), [[0, 0, 1], [1, 0, 0]])
    with pytest.raises(InvalidInputError):
        diffcore.one_hot([3], 3)


def quadratic(x: numpy.typing.NDArray[numpy.float64]) -> Tuple[float, numpy.typing.NDArray[numpy.float64]]:
    return float((x**2).sum()), 2 * x


def test_check_gradient_quadratic() -> None:
    report = diffcore.check_gradient(quadratic, [1.0, 2.0])
    numpy.testing.assert_allclose(report.analytic, [2.0, 4.0])
    assert report.max_rel_err < 1e-6


def test_check_gradient_cross_entropy() -> None:
    target = diffcore.one_hot(0, 4)

    def loss(x: numpy.typing.NDArray[numpy.float64]) -> Tuple[float, numpy.typing.NDArray[numpy.float64]]:
        probs = diffcore.softmax(x)
        return diffcore.cross_entropy(target, probs), probs - target

    report = diffcore.check_gradient(loss, numpy.random.default_rng(1).normal(size=4))
    assert report.max_rel_err < 1e-4


def test_check_gradient_constant() -> None:
    report = diffcore.check_gradient(lambda x: (3.0, numpy.zeros_like(x)), [0.5, -0.5])
    assert report.max_rel_err == 0.0


def test_check_gradient_catches_wrong_gradient() -> None:
    report = diffcore.check_gradient(lambda x: (float((x**2).sum()), x), [1.0, 2.0])
    assert report.max_rel_err > 0.1


def test_check_gradient_catches_tiny_wrong_gradient() -> None:
    # The true gradient is zero, so any reported entry is pure error.
    report = diffcore.check_gradient(lambda x: (1.0, numpy.array([5e-10])), [0.3])
    assert report.max_rel_err >= 1e-4
    assert report.max_rel_err == pytest.approx(0.05)


def test_check_gradient_rejects_step() -> None:
    with pytest.raises(InvalidParameterError):
        diffcore.check_gradient(quadratic, [1.0], step=1e-2)


def test_check_gradient_non_finite() -> None:
    with pytest.raises(NumericError):
        diffcore.check_gradient(lambda x: (math.inf, x), [1.0])


def test_cosine_annealing_endpoints() -> None:
    assert diffcore.cosine_annealing(0, 10) == 1.0
    assert diffcore.cosine_annealing(5, 10) == pytest.approx(0.5)
    assert diffcore.cosine_annealing(10, 10) == pytest.approx(0.0, abs=1e-15)


def test_sgd_momentum() -> None:
    optimizer = diffcore.SgdMomentum(momentum=0.5)
    params = numpy.array([1.0, -1.0])
    grad = numpy.array([1.0, 2.0])
    params = optimizer.step(params, grad, lr=0.1)
    numpy.testing.assert_allclose(params, [0.9, -1.2])
    params = optimizer.step(params, grad, lr=0.1)
    # velocity = 0.5 * grad + grad
    numpy.testing.assert_allclose(params, [0.75, -1.5])


def test_sgd_weight_decay_and_validation() -> None:
    optimizer = diffcore.SgdMomentum(momentum=0.0, weight_decay=0.1)
    numpy.testing.assert_allclose(optimizer.step(numpy.array([2.0]), numpy.array([0.0]), lr=1.0), [1.8])
    with pytest.raises(InvalidParameterError):
        diffcore.SgdMomentum(momentum=1.0)


def test_numerics_do_not_log(caplog: pytest.LogCaptureFixture) -> None:
    with caplog.at_level(logging.INFO, logger="charmonium.dam"):
        diffcore.softmax(numpy.ones((3, 3)))
        diffcore.check_gradient(quadratic, [1.0])
    assert not caplog.records


@pytest.mark.parametrize("tau", [1e-8, 1e-3, 1.0, 1e3])
def test_softmax_properties(tau: float) -> None:
    rng = numpy.random.default_rng(int(-math.log10(tau)) + 10)
    for _ in range(200):
        logits = rng.normal(0.0, 5.0, size=rng.integers(2, 9))
        probs = diffcore.softmax(logits, tau)
        assert abs(probs.sum() - 1.0) < 1e-9
        assert numpy.argmax(probs) == numpy.argmax(logits)


def test_softmax_shift_invariance() -> None:
    rng = numpy.random.default_rng(3)
    for _ in range(200):
        logits = rng.normal(0.0, 5.0, size=rng.integers(2, 9))
        shifted = diffcore.softmax(logits + rng.uniform(-50.0, 50.0))
        numpy.testing.assert_allclose(shifted, diffcore.softmax(logits), rtol=0, atol=1e-12)


def test_cross_entropy_bounded_by_entropy() -> None:
    rng = numpy.random.default_rng(4)
    for _ in range(1000):
        classes = int(rng.integers(2, 9))
        p = rng.dirichlet(numpy.ones(classes))
        q = rng.dirichlet(numpy.ones(classes))
        assert diffcore.cross_entropy(p, q) >= diffcore.entropy(p) - 1e-12
