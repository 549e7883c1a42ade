"""The source/target classifier: d -> h (tanh) -> C, with closed-form gradients."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy
import numpy.typing

from . import diffcore
from .config import Config
from .datagen import DomainDataset
from .errors import InvalidParameterError, NumericError, ParamFileError, ShapeError
from .util import FloatArray, PathLike, read_param_file, write_param_file

logger = logging.getLogger("charmonium.dam")

MODEL_FILE_KIND = "charmonium.dam classifier"


@dataclass
class TrainConfig(Config):
    learning_rate: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-3
    epochs: int = 50
    batch_size: int = 64
    seed: int = 0
    hidden: int = 32
    # Train only the output layer; the objective is then convex.
    freeze_hidden: bool = False

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise InvalidParameterError(f"learning rate must be positive, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise InvalidParameterError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise InvalidParameterError(f"weight decay must be >= 0, got {self.weight_decay}")
        if self.epochs < 1:
            raise InvalidParameterError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise InvalidParameterError(f"batch size must be >= 1, got {self.batch_size}")
        if self.hidden < 1:
            raise InvalidParameterError(f"hidden width must be >= 1, got {self.hidden}")


@dataclass(frozen=True, eq=False)
class ClassifierModel:
    w1: FloatArray
    b1: FloatArray
    w2: FloatArray
    b2: FloatArray
    seed: int = 0
    loss_history: Tuple[float, ...] = ()

    def __post_init__(self) -> None:
        arrays = [numpy.array(getattr(self, name), dtype=numpy.float64) for name in ("w1", "b1", "w2", "b2")]
        w1, b1, w2, b2 = arrays
        if w1.ndim != 2 or b1.shape != (w1.shape[1],) or w2.shape[0] != w1.shape[1] or b2.shape != (w2.shape[1],):
            raise ShapeError(
                f"inconsistent layer shapes {w1.shape}, {b1.shape}, {w2.shape}, {b2.shape}"
            )
        if not all(numpy.all(numpy.isfinite(arr)) for arr in arrays):
            raise NumericError("model parameters must be finite")
        for name, arr in zip(("w1", "b1", "w2", "b2"), arrays):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def dim(self) -> int:
        return int(self.w1.shape[0])

    @property
    def hidden(self) -> int:
        return int(self.w1.shape[1])

    @property
    def classes(self) -> int:
        return int(self.w2.shape[1])

    def flat(self) -> FloatArray:
        return numpy.concatenate([self.w1.ravel(), self.b1, self.w2.ravel(), self.b2])

    def with_flat(self, theta: numpy.typing.ArrayLike, loss_history: Optional[Tuple[float, ...]] = None) -> ClassifierModel:
        theta_arr = numpy.asarray(theta, dtype=numpy.float64)
        if theta_arr.shape != (self.parameter_count,):
            raise ShapeError(f"expected {self.parameter_count} parameters, got {theta_arr.shape}")
        d, h, c = self.dim, self.hidden, self.classes
        splits = numpy.cumsum([d * h, h, h * c])
        w1, b1, w2, b2 = numpy.split(theta_arr, splits)
        return ClassifierModel(
            w1.reshape(d, h),
            b1,
            w2.reshape(h, c),
            b2,
            self.seed,
            self.loss_history if loss_history is None else loss_history,
        )

    @property
    def parameter_count(self) -> int:
        return self.w1.size + self.b1.size + self.w2.size + self.b2.size

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, ClassifierModel)
            and self.seed == other.seed
            and all(
                numpy.array_equal(getattr(self, name), getattr(other, name))
                for name in ("w1", "b1", "w2", "b2")
            )
        )


def init_model(dim: int, classes: int, hidden: int = 32, seed: int = 0) -> ClassifierModel:
    """Uniform initialization in +-1/sqrt(fan_in) for every layer."""
    rng = numpy.random.default_rng([seed, 11])
    bound1 = 1 / math.sqrt(dim)
    bound2 = 1 / math.sqrt(hidden)
    return ClassifierModel(
        rng.uniform(-bound1, bound1, (dim, hidden)),
        rng.uniform(-bound1, bound1, hidden),
        rng.uniform(-bound2, bound2, (hidden, classes)),
        rng.uniform(-bound2, bound2, classes),
        seed,
    )


def parameter_count(model: ClassifierModel) -> int:
    return model.parameter_count


def _as_batch(model: ClassifierModel, x: numpy.typing.ArrayLike) -> Tuple[FloatArray, bool]:
    arr = numpy.asarray(x, dtype=numpy.float64)
    is_vector = arr.ndim == 1
    batch = numpy.atleast_2d(arr)
    if batch.ndim != 2 or batch.shape[1] != model.dim:
        raise ShapeError(f"model expects inputs of dimension {model.dim}, got shape {arr.shape}")
    return batch, is_vector


def penultimate_features(model: ClassifierModel, x: numpy.typing.ArrayLike) -> FloatArray:
    batch, is_vector = _as_batch(model, x)
    hidden = numpy.tanh(batch @ model.w1 + model.b1)
    return hidden[0] if is_vector else hidden


def logits(model: ClassifierModel, x: numpy.typing.ArrayLike) -> FloatArray:
    batch, is_vector = _as_batch(model, x)
    out = numpy.tanh(batch @ model.w1 + model.b1) @ model.w2 + model.b2
    return out[0] if is_vector else out


def predict(model: ClassifierModel, x: numpy.typing.ArrayLike, tau: float = 1.0) -> FloatArray:
    return diffcore.softmax(logits(model, x), tau)


def backward(model: ClassifierModel, x: numpy.typing.ArrayLike, grad_logits: FloatArray) -> FloatArray:
    """Flat parameter gradient given dL/dlogits for a batch."""
    batch, _ = _as_batch(model, x)
    grad_z = numpy.atleast_2d(grad_logits)
    hidden = numpy.tanh(batch @ model.w1 + model.b1)
    grad_w2 = hidden.T @ grad_z
    grad_b2 = grad_z.sum(axis=0)
    grad_pre = (grad_z @ model.w2.T) * (1 - hidden**2)
    grad_w1 = batch.T @ grad_pre
    grad_b1 = grad_pre.sum(axis=0)
    return numpy.concatenate([grad_w1.ravel(), grad_b1, grad_w2.ravel(), grad_b2])


def soft_target_grad(probs: FloatArray, targets: FloatArray, weights: FloatArray) -> FloatArray:
    """dL/dlogits of mean_i w_i H(t_i, softmax(z_i))."""
    mass = targets.sum(axis=1, keepdims=True)
    return weights[:, None] * (probs * mass - targets) / probs.shape[0]


def loss_and_grad(
    model: ClassifierModel,
    x: numpy.typing.ArrayLike,
    targets: numpy.typing.ArrayLike,
    weights: Optional[numpy.typing.ArrayLike] = None,
) -> Tuple[float, FloatArray]:
    """Weighted soft-target cross-entropy and its flat gradient."""
    batch, _ = _as_batch(model, x)
    target_arr = numpy.atleast_2d(numpy.asarray(targets, dtype=numpy.float64))
    weight_arr = (
        numpy.ones(batch.shape[0]) if weights is None else numpy.asarray(weights, dtype=numpy.float64)
    )
    probs = predict(model, batch)
    value = float((weight_arr * diffcore.cross_entropy_rows(target_arr, probs)).mean())
    return value, backward(model, batch, soft_target_grad(probs, target_arr, weight_arr))


def train_source(ds: DomainDataset, cfg: TrainConfig) -> ClassifierModel:
    """Mini-batch SGD on mean cross-entropy over the labeled source domain."""
    if ds.num_classes < 2:
        raise InvalidParameterError("source training needs at least 2 classes")
    model = init_model(ds.dim, ds.num_classes, cfg.hidden, cfg.seed)
    theta = model.flat()
    hidden_size = ds.dim * cfg.hidden + cfg.hidden
    optimizer = diffcore.SgdMomentum(cfg.momentum, cfg.weight_decay)
    targets = diffcore.one_hot(ds.labels, ds.num_classes)
    rng = numpy.random.default_rng([cfg.seed, 12])
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(ds.size)
        total = 0.0
        for start in range(0, ds.size, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            value, grad = loss_and_grad(model.with_flat(theta), ds.samples[idx], targets[idx])
            if not math.isfinite(value):
                raise NumericError("source training loss is not finite", epoch=epoch, phase="source")
            new_theta = optimizer.step(theta, grad, cfg.learning_rate)
            if cfg.freeze_hidden:
                new_theta[:hidden_size] = theta[:hidden_size]
            theta = new_theta
            total += value * idx.size
        history.append(total / ds.size)
        logger.info("source epoch %d/%d loss %.6f", epoch, cfg.epochs, history[-1])
    return model.with_flat(theta, tuple(history))


def clone_model(model: ClassifierModel) -> ClassifierModel:
    return model.with_flat(model.flat().copy())


def save_model(model: ClassifierModel, path: PathLike) -> None:
    write_param_file(
        path,
        MODEL_FILE_KIND,
        {"dim": model.dim, "hidden": model.hidden, "classes": model.classes, "seed": model.seed},
        [
            ("w1", "learnable", model.w1),
            ("b1", "learnable", model.b1),
            ("w2", "learnable", model.w2),
            ("b2", "learnable", model.b2),
            ("loss_history", "frozen", numpy.array(model.loss_history, dtype=numpy.float64)),
        ],
    )


def load_model(path: PathLike) -> ClassifierModel:
    header, sections = read_param_file(path, MODEL_FILE_KIND)
    try:
        model = ClassifierModel(
            sections["w1"].values,
            sections["b1"].values,
            sections["w2"].values,
            sections["b2"].values,
            int(header["seed"]),
            tuple(sections["loss_history"].values.tolist()),
        )
    except KeyError as exc:
        raise ParamFileError(f"{path}: missing {exc}") from exc
    if (model.dim, model.hidden, model.classes) != (int(header["dim"]), int(header["hidden"]), int(header["classes"])):
        raise ParamFileError(f"{path}: header architecture does not match the stored layers")
    return model
