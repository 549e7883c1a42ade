import math
from pathlib import Path
from typing import Dict

import numpy
import pytest
from dam_test_cases import small_pair

from charmonium.dam import datagen
from charmonium.dam.datagen import DomainDataset, ShiftSpec
from charmonium.dam.errors import (
    BudgetExhaustedError,
    DatasetParseError,
    DatasetValidationError,
    DuplicateQueryError,
    InvalidDataError,
    InvalidParameterError,
)


def test_generation_is_deterministic() -> None:
    assert small_pair(seed=3) == small_pair(seed=3)
    assert small_pair(seed=3).target != small_pair(seed=4).target


def test_every_class_present() -> None:
    pair = datagen.generate_domain_pair(5, 16, 200, 1000, ShiftSpec(), seed=0)
    assert pair.target.size == 1000
    assert numpy.bincount(pair.target.labels, minlength=5).min() >= 100
    assert {ds.domain_tag for ds in pair} == {"source", "target", "foundation"}
    assert pair.foundation.size == pair.source.size


def test_arrays_are_read_only() -> None:
    ds = small_pair().source
    with pytest.raises(ValueError):
        ds.samples[0, 0] = 1.0


def test_too_few_samples() -> None:
    with pytest.raises(InvalidParameterError):
        datagen.generate_domain_pair(3, 4, 20, 90, ShiftSpec(), seed=0)


@pytest.mark.parametrize(
    "kwargs",
    [{"scale": 0.0}, {"label_noise": 0.5}, {"class_prior_skew": -1.0}, {"rotation_angle": math.inf}],
)
def test_shift_validation(kwargs: Dict[str, float]) -> None:
    with pytest.raises(InvalidParameterError):
        ShiftSpec(**kwargs)


def test_identity_shift() -> None:
    x = numpy.random.default_rng(0).normal(size=(10, 4))
    numpy.testing.assert_allclose(datagen.apply_shift(x, ShiftSpec(), x.mean(axis=0)), x, atol=1e-12)


def test_rotation_keeps_distances() -> None:
    x = numpy.random.default_rng(0).normal(size=(10, 5))
    center = numpy.zeros(5)
    shifted = datagen.apply_shift(x, ShiftSpec(rotation_angle=math.pi / 6), center)
    numpy.testing.assert_allclose(numpy.linalg.norm(shifted, axis=1), numpy.linalg.norm(x, axis=1))
    assert not numpy.allclose(shifted, x)


def test_translation_and_scale() -> None:
    x = numpy.array([[1.0, 2.0]])
    shifted = datagen.apply_shift(x, ShiftSpec(translation=(1.0, -1.0), scale=2.0), [0.0, 0.0])
    numpy.testing.assert_allclose(shifted, [[3.0, 3.0]])


def test_class_priors() -> None:
    numpy.testing.assert_allclose(datagen.class_priors(4, 0.0), 0.25)
    skewed = datagen.class_priors(4, 2.0)
    assert skewed.sum() == pytest.approx(1.0)
    assert numpy.all(numpy.diff(skewed) < 0)


def test_stratified_counts() -> None:
    counts = datagen.stratified_counts(10, numpy.array([0.97, 0.01, 0.01, 0.01]))
    assert counts.sum() == 10
    assert counts.min() >= 1


@pytest.mark.parametrize("classes,dim", [(3, 4), (5, 2)])
def test_bayes_classifies_means(classes: int, dim: int) -> None:
    mixture = datagen.source_mixture(classes, dim)
    numpy.testing.assert_array_equal(datagen.bayes_classify(mixture.means, mixture), numpy.arange(classes))


def test_label_noise_only_touches_source() -> None:
    clean = datagen.generate_domain_pair(3, 4, 90, 90, ShiftSpec(), seed=1)
    noisy = datagen.generate_domain_pair(3, 4, 90, 90, ShiftSpec(label_noise=0.3), seed=1)
    assert clean.target == noisy.target
    assert not numpy.array_equal(clean.source.labels, noisy.source.labels)


def test_oracle() -> None:
    labels = [2, 0, 1, 1, 0]
    oracle = datagen.Oracle(labels, budget=2)
    assert datagen.oracle_label(oracle, 3) == 1
    assert oracle.query_log == (3,)
    with pytest.raises(DuplicateQueryError):
        oracle.query(3)
    with pytest.raises(KeyError):
        oracle.query(3)
    assert oracle.query(0) == 2
    with pytest.raises(BudgetExhaustedError):
        oracle.query(1)
    with pytest.raises(IndexError):
        datagen.Oracle(labels, budget=5).query(5)


def test_dataset_round_trip(tmp_path: Path) -> None:
    ds = small_pair().target
    datagen.save_dataset(ds, tmp_path / "target.csv")
    assert datagen.load_dataset(tmp_path / "target.csv") == ds


def test_truncated_dataset(tmp_path: Path) -> None:
    path = tmp_path / "target.csv"
    datagen.save_dataset(small_pair().target, path)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-3]) + "\n")
    with pytest.raises(DatasetParseError) as excinfo:
        datagen.load_dataset(path)
    assert excinfo.value.line == len(lines) - 2


def test_bad_label_names_row(tmp_path: Path) -> None:
    path = tmp_path / "bad.csv"
    path.write_text("2,2,3,t,0\n0,1.0,2.0\n1,1.0,2.0\n2,0.5,0.5\n")
    with pytest.raises(DatasetValidationError) as excinfo:
        datagen.load_dataset(path)
    assert excinfo.value.row == 2


def test_bad_float(tmp_path: Path) -> None:
    path = tmp_path / "bad.csv"
    path.write_text("2,2,2,t,0\n0,1.0,oops\n1,1.0,2.0\n")
    with pytest.raises(DatasetParseError) as excinfo:
        datagen.load_dataset(path)
    assert (excinfo.value.line, excinfo.value.field) == (2, 3)


def test_missing_class() -> None:
    with pytest.raises(InvalidDataError):
        DomainDataset(numpy.zeros((3, 2)), numpy.array([0, 0, 1]), 3, "t", 0)
