import math
from pathlib import Path
from typing import Any, Tuple

import numpy
import numpy.typing
import pytest
from dam_test_cases import constant_model, random_model, small_pair, small_train_config

from charmonium.dam import diffcore, models
from charmonium.dam.errors import InvalidParameterError, NumericError, ParamFileError, ShapeError
from charmonium.dam.models import TrainConfig


def test_parameter_count() -> None:
    assert models.init_model(16, 5, hidden=32).parameter_count == 709


def test_shapes() -> None:
    model = models.init_model(4, 3, hidden=8)
    assert models.logits(model, numpy.zeros((7, 4))).shape == (7, 3)
    assert models.logits(model, numpy.zeros(4)).shape == (3,)
    assert models.penultimate_features(model, numpy.zeros((2, 4))).shape == (2, 8)
    with pytest.raises(ShapeError):
        models.logits(model, numpy.zeros((2, 5)))


def test_zero_weights_predict_uniform() -> None:
    probs = models.predict(constant_model([0.0, 0.0, 0.0]), numpy.ones((4, 2)))
    numpy.testing.assert_allclose(probs, 1 / 3)


def test_constant_model_logits() -> None:
    numpy.testing.assert_allclose(models.logits(constant_model([2.0, 1.0]), [5.0, -3.0]), [2.0, 1.0])


@pytest.mark.parametrize("weighted", [False, True])
def test_loss_gradient(weighted: bool) -> None:
    model = random_model(seed=1)
    rng = numpy.random.default_rng(2)
    x = rng.normal(size=(6, model.dim))
    targets = diffcore.softmax(rng.normal(size=(6, model.classes)))
    weights = rng.uniform(0, 3, 6) if weighted else None

    def loss(theta: numpy.typing.NDArray[numpy.float64]) -> Tuple[float, numpy.typing.NDArray[numpy.float64]]:
        return models.loss_and_grad(model.with_flat(theta), x, targets, weights)

    assert diffcore.check_gradient(loss, model.flat()).max_rel_err < 1e-4


def test_train_source_learns() -> None:
    pair = small_pair(seed=0)
    cfg = TrainConfig(learning_rate=0.05, epochs=40, batch_size=32, hidden=8)
    model = models.train_source(pair.source, cfg)
    accuracy = float((models.logits(model, pair.source.samples).argmax(axis=1) == pair.source.labels).mean())
    assert accuracy > 0.8
    assert len(model.loss_history) == 40
    assert model.loss_history[-1] < model.loss_history[0]


def test_train_source_is_deterministic() -> None:
    ds = small_pair().source
    assert models.train_source(ds, small_train_config) == models.train_source(ds, small_train_config)


def test_freeze_hidden() -> None:
    ds = small_pair().source
    cfg = TrainConfig(learning_rate=0.05, epochs=3, batch_size=32, hidden=8, freeze_hidden=True)
    trained = models.train_source(ds, cfg)
    init = models.init_model(ds.dim, ds.num_classes, 8, cfg.seed)
    numpy.testing.assert_array_equal(trained.w1, init.w1)
    numpy.testing.assert_array_equal(trained.b1, init.b1)
    assert not numpy.array_equal(trained.w2, init.w2)


def test_non_finite_loss(monkeypatch: pytest.MonkeyPatch) -> None:
    def nan_loss(model: models.ClassifierModel, *args: Any, **kwargs: Any) -> Tuple[float, Any]:
        return math.nan, numpy.zeros(model.parameter_count)

    monkeypatch.setattr(models, "loss_and_grad", nan_loss)
    with pytest.raises(NumericError) as excinfo:
        models.train_source(small_pair().source, small_train_config)
    assert (excinfo.value.epoch, excinfo.value.phase) == (1, "source")


@pytest.mark.parametrize("field", ["epochs", "batch_size", "hidden"])
def test_train_config_rejects_zero(field: str) -> None:
    with pytest.raises(InvalidParameterError):
        TrainConfig(**{field: 0})


def test_with_flat_shape() -> None:
    model = models.init_model(3, 2, hidden=4)
    with pytest.raises(ShapeError):
        model.with_flat(numpy.zeros(model.parameter_count + 1))
    assert model.with_flat(model.flat()) == model


def test_parameters_are_read_only() -> None:
    model = models.init_model(3, 2, hidden=4)
    with pytest.raises(ValueError):
        model.w1[0, 0] = 1.0


def test_clone_is_equal_and_independent() -> None:
    model = random_model()
    clone = models.clone_model(model)
    assert clone == model
    assert clone.w1 is not model.w1


def test_model_round_trip(tmp_path: Path) -> None:
    model = models.train_source(small_pair().source, small_train_config)
    models.save_model(model, tmp_path / "model.txt")
    loaded = models.load_model(tmp_path / "model.txt")
    assert loaded == model
    assert loaded.loss_history == model.loss_history


def test_load_rejects_other_files(tmp_path: Path) -> None:
    path = tmp_path / "model.txt"
    path.write_text("not a model\n")
    with pytest.raises(ParamFileError):
        models.load_model(path)


@pytest.mark.parametrize("seed", range(5))
def test_last_layer_descent_is_monotone(seed: int) -> None:
    pair = small_pair(seed=seed)
    cfg = TrainConfig(
        learning_rate=1e-3,
        momentum=0.0,
        weight_decay=0.0,
        epochs=30,
        batch_size=pair.source.size,
        hidden=8,
        seed=seed,
        freeze_hidden=True,
    )
    history = models.train_source(pair.source, cfg).loss_history
    assert all(later <= earlier + 1e-12 for earlier, later in zip(history, history[1:]))
    assert history[-1] < history[0]


def test_predict_follows_logits() -> None:
    model = random_model(seed=3)
    x = numpy.random.default_rng(4).normal(size=(50, model.dim))
    raw = models.logits(model, x)
    probs = models.predict(model, x)
    numpy.testing.assert_array_equal(probs.argmax(axis=1), raw.argmax(axis=1))
    numpy.testing.assert_allclose(diffcore.softmax(raw + 7.5), probs, rtol=0, atol=1e-12)
    numpy.testing.assert_allclose(probs.sum(axis=1), 1.0, rtol=0, atol=1e-12)
