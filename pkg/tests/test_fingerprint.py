import re
from pathlib import Path
from typing import Any

import numpy
import pytest

from charmonium.dam.errors import InvalidParameterError, UnfreezableTypeError
from charmonium.dam.fingerprint import Blake2sHasher, fingerprint, source_fingerprint
from charmonium.dam.harness import ExperimentConfig
from charmonium.dam.models import TrainConfig

distinct_values = [
    None,
    0,
    1,
    1.0,
    True,
    "1",
    b"1",
    (1,),
    [1, 2],
    [2, 1],
    {"a": 1},
    {"a": 2},
    numpy.zeros(3),
    numpy.zeros(3, dtype=numpy.float32),
    numpy.zeros((3, 1)),
    TrainConfig(),
    TrainConfig(epochs=3),
]


def test_format() -> None:
    assert re.fullmatch("[0-9a-f]{16}", fingerprint(ExperimentConfig()))


def test_distinct_values_have_distinct_fingerprints() -> None:
    fingerprints = [fingerprint(value) for value in distinct_values]
    assert len(set(fingerprints)) == len(distinct_values)


@pytest.mark.parametrize("value", distinct_values)
def test_fingerprint_is_deterministic(value: Any) -> None:
    assert fingerprint(value) == fingerprint(value)


def test_dict_order_is_ignored() -> None:
    assert fingerprint({"a": 1, "b": 2}) == fingerprint({"b": 2, "a": 1})


def test_equal_configs() -> None:
    assert fingerprint(ExperimentConfig(rho=0.1)) == fingerprint(ExperimentConfig(rho=0.1))
    assert fingerprint(ExperimentConfig(rho=0.1)) != fingerprint(ExperimentConfig(rho=0.2))
    assert fingerprint(ExperimentConfig().to_dict()) != fingerprint(ExperimentConfig())


def test_numpy_scalars_match_python() -> None:
    assert fingerprint(numpy.float64(0.5)) == fingerprint(0.5)
    assert fingerprint(numpy.int64(3)) == fingerprint(3)


def test_unfreezable() -> None:
    with pytest.raises(UnfreezableTypeError):
        fingerprint(object())
    with pytest.raises(UnfreezableTypeError):
        fingerprint({"a": {1, 2}})


def test_source_fingerprint(tmp_path: Path) -> None:
    (tmp_path / "a.py").write_text("x = 1\n")
    (tmp_path / "sub").mkdir()
    (tmp_path / "sub" / "b.py").write_text("y = 2\n")
    before = source_fingerprint(tmp_path)
    assert source_fingerprint(tmp_path) == before
    (tmp_path / "sub" / "b.py").write_text("y = 3\n")
    assert source_fingerprint(tmp_path) != before


def test_digest_width() -> None:
    assert len(fingerprint({"rho": 0.05}, Blake2sHasher(128))) == 32
    with pytest.raises(InvalidParameterError):
        Blake2sHasher(12)
