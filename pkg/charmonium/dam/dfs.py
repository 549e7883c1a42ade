"""Prompt tuning on the queried set: cross-entropy plus an anchor regularizer."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, NamedTuple, Optional, Tuple

import numpy
import numpy.typing

from . import diffcore
from .config import Config
from .errors import InvalidInputError, InvalidParameterError, NumericError, ShapeError
from .util import FloatArray
from .vilsurrogate import FrozenEncoder, PromptBank, encode_image, loss_kg, prompt_gradient, text_embeddings

logger = logging.getLogger("charmonium.dam")

# Queried sets up to this size are tuned full-batch.
FULL_BATCH_LIMIT = 256


@dataclass
class DfsConfig(Config):
    base_lr: float = 2e-3
    warmup_lr: float = 1e-5
    epochs: int = 50
    batch_size: int = 64
    seed: int = 0
    momentum: float = 0.9
    use_kg: bool = True

    def validate(self) -> None:
        if not self.base_lr > 0 or not self.warmup_lr > 0:
            raise InvalidParameterError(
                f"learning rates must be positive, got base {self.base_lr} and warmup {self.warmup_lr}"
            )
        if self.warmup_lr > self.base_lr:
            raise InvalidParameterError(f"warmup lr {self.warmup_lr} exceeds base lr {self.base_lr}")
        if self.epochs < 1:
            raise InvalidParameterError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise InvalidParameterError(f"batch size must be >= 1, got {self.batch_size}")
        if not 0 <= self.momentum < 1:
            raise InvalidParameterError(f"momentum must lie in [0, 1), got {self.momentum}")


class LossTerms(NamedTuple):
    total: float
    ce: float
    kg: float


def dfs_learning_rate(epoch: int, cfg: DfsConfig) -> float:
    """Warmup for the first epoch, then cosine annealing from ``base_lr`` to 0.

    >>> cfg = DfsConfig(epochs=5)
    >>> [dfs_learning_rate(epoch, cfg) for epoch in (1, 2, 5)]
    [1e-05, 0.002, 0.0]

    """
    if not 1 <= epoch <= cfg.epochs:
        raise InvalidParameterError(f"epoch {epoch} outside [1, {cfg.epochs}]")
    if epoch == 1:
        return cfg.warmup_lr
    if cfg.epochs <= 2:
        return cfg.base_lr
    return cfg.base_lr * diffcore.cosine_annealing(epoch - 2, cfg.epochs - 2)


def _prepare(
    bank: PromptBank, enc: FrozenEncoder, x: numpy.typing.ArrayLike, y: numpy.typing.ArrayLike
) -> Tuple[FloatArray, FloatArray]:
    batch = numpy.atleast_2d(numpy.asarray(x, dtype=numpy.float64))
    labels = numpy.atleast_1d(numpy.asarray(y, dtype=numpy.int64))
    if labels.size == 0 or batch.size == 0:
        raise InvalidInputError("the queried set is empty")
    if batch.shape[0] != labels.shape[0]:
        raise ShapeError(f"{batch.shape[0]} queried samples but {labels.shape[0]} labels")
    return encode_image(enc, batch), diffcore.one_hot(labels, bank.classes)


def _terms_and_grad(
    bank: PromptBank, features: FloatArray, targets: FloatArray, use_kg: bool
) -> Tuple[LossTerms, FloatArray]:
    sims = features @ text_embeddings(bank).T
    probs = diffcore.softmax(sims, bank.tau)
    ce = diffcore.cross_entropy_rows(targets, probs).mean()
    kg = loss_kg(bank) if use_kg else 0.0
    grad_sims = (probs - targets) / (bank.tau * features.shape[0])
    grad = prompt_gradient(bank, features, grad_sims, kg_weight=1.0 if use_kg else 0.0)
    return LossTerms(float(ce + kg), float(ce), float(kg)), grad


def loss_c_terms(
    bank: PromptBank,
    enc: FrozenEncoder,
    x: numpy.typing.ArrayLike,
    y: numpy.typing.ArrayLike,
    use_kg: bool = True,
) -> LossTerms:
    features, targets = _prepare(bank, enc, x, y)
    return _terms_and_grad(bank, features, targets, use_kg)[0]


def loss_c(bank: PromptBank, enc: FrozenEncoder, x: numpy.typing.ArrayLike, y: numpy.typing.ArrayLike) -> float:
    """Mean cross-entropy of the surrogate on the queried set plus the anchor term."""
    return loss_c_terms(bank, enc, x, y).total


def loss_c_and_grad(
    bank: PromptBank,
    enc: FrozenEncoder,
    x: numpy.typing.ArrayLike,
    y: numpy.typing.ArrayLike,
    use_kg: bool = True,
) -> Tuple[float, FloatArray]:
    """``loss_c`` and its gradient with respect to the context, shape ``(m, D)``."""
    features, targets = _prepare(bank, enc, x, y)
    terms, grad = _terms_and_grad(bank, features, targets, use_kg)
    return terms.total, grad


def tune_prompts(
    bank: PromptBank,
    enc: FrozenEncoder,
    x: numpy.typing.ArrayLike,
    y: numpy.typing.ArrayLike,
    cfg: DfsConfig,
    history: Optional[List[Dict[str, Any]]] = None,
) -> PromptBank:
    """Tune only the context vectors; every frozen part of ``bank`` is carried over as is.

    When ``history`` is given, one entry per epoch is appended with the
    epoch's learning rate, the end-of-epoch loss terms, and the queried-set
    accuracy.

    """
    features, targets = _prepare(bank, enc, x, y)
    labels = targets.argmax(axis=1)
    n = features.shape[0]
    batch_size = n if n <= FULL_BATCH_LIMIT else cfg.batch_size
    optimizer = diffcore.SgdMomentum(cfg.momentum)
    rng = numpy.random.default_rng([cfg.seed, 40])
    context = bank.context.copy()
    for epoch in range(1, cfg.epochs + 1):
        lr = dfs_learning_rate(epoch, cfg)
        order = numpy.arange(n) if batch_size == n else rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            terms, grad = _terms_and_grad(bank.with_context(context), features[idx], targets[idx], cfg.use_kg)
            if not math.isfinite(terms.total):
                raise NumericError("prompt-tuning loss is not finite", epoch=epoch, phase="dfs")
            context = optimizer.step(context, grad, lr)
            if logger.isEnabledFor(logging.DEBUG):
                logger.debug("dfs epoch %d batch at %d: ce %.6f kg %.6f", epoch, start, terms.ce, terms.kg)
        current = bank.with_context(context)
        terms = _terms_and_grad(current, features, targets, cfg.use_kg)[0]
        if not math.isfinite(terms.total):
            raise NumericError("prompt-tuning loss is not finite", epoch=epoch, phase="dfs")
        accuracy = float((diffcore.softmax(features @ text_embeddings(current).T, bank.tau).argmax(axis=1) == labels).mean())
        logger.info(
            "dfs epoch %d/%d lr %.3g loss %.6f (ce %.6f, kg %.6f) queried accuracy %.4f",
            epoch, cfg.epochs, lr, terms.total, terms.ce, terms.kg, accuracy,
        )
        if history is not None:
            history.append(
                {"epoch": epoch, "lr": lr, "loss": terms.total, "ce": terms.ce, "kg": terms.kg, "accuracy": accuracy}
            )
    return bank.with_context(context)
