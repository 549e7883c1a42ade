"""Alternating distillation between the target model and the prompted surrogate.

Each epoch fixes the confident set and the surrogate's pseudo-labels at its
start, runs a pass of target-model updates with the prompts frozen, then a
pass of prompt updates taught by the updated, now frozen, target model.
Queried samples are always taught by their oracle label at weight
``beta_q``; every other sample gets the other model's prediction at weight
``beta``.

"""
from __future__ import annotations

import functools
import logging
import math
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy
import numpy.typing

from . import diffcore, models
from .config import Config
from .errors import ContractError, InvalidInputError, InvalidParameterError, NumericError
from .models import ClassifierModel
from .util import FloatArray, IntArray
from .vilsurrogate import (
    FrozenEncoder,
    PromptBank,
    ViLSurrogate,
    encode_image,
    loss_kg,
    prompt_gradient,
    similarities,
    text_embeddings,
)

logger = logging.getLogger("charmonium.dam")

Queried = Mapping[int, int]
Monitor = Callable[[int, ClassifierModel, Optional[ViLSurrogate]], Optional[Mapping[str, float]]]


@dataclass
class AdlConfig(Config):
    beta_q: float = 3.0
    beta: float = 0.3
    top_n: int = 16
    epochs: int = 30
    batch_size: int = 64
    target_lr: float = 1e-2
    target_momentum: float = 0.9
    target_weight_decay: float = 1e-3
    prompt_lr: float = 2e-3
    prompt_momentum: float = 0.9
    tau_hard: float = 1e-8
    seed: int = 0
    update_prompts: bool = True

    def validate(self) -> None:
        if not self.beta > 0:
            raise InvalidParameterError(f"beta must be positive, got {self.beta}")
        if self.beta_q < self.beta:
            raise InvalidParameterError(f"beta_q ({self.beta_q}) must be >= beta ({self.beta})")
        if self.top_n < 1:
            raise InvalidParameterError(f"top_n must be >= 1, got {self.top_n}")
        if self.epochs < 1:
            raise InvalidParameterError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise InvalidParameterError(f"batch size must be >= 1, got {self.batch_size}")
        if not self.target_lr > 0 or not self.prompt_lr > 0:
            raise InvalidParameterError("learning rates must be positive")
        if not 0 <= self.target_momentum < 1 or not 0 <= self.prompt_momentum < 1:
            raise InvalidParameterError("momentum must lie in [0, 1)")
        if self.target_weight_decay < 0:
            raise InvalidParameterError(f"weight decay must be >= 0, got {self.target_weight_decay}")
        if not 0 < self.tau_hard <= 1e-6:
            raise InvalidParameterError(f"tau_hard must lie in (0, 1e-6], got {self.tau_hard}")


class TeacherSignal(NamedTuple):
    distribution: FloatArray
    weight: float


class TargetTerms(NamedTuple):
    total: float
    dist: float
    ent: float
    div: float


class PromptTerms(NamedTuple):
    total: float
    dist: float
    kg: float


class AdaptResult(NamedTuple):
    model: ClassifierModel
    bank: Optional[PromptBank]
    metrics: List[Dict[str, float]]


@functools.singledispatch
def teacher_scores(teacher: Any, x: numpy.typing.ArrayLike) -> FloatArray:
    """Unnormalized class scores of a teacher, shape ``(n, C)``."""
    raise InvalidParameterError(f"{type(teacher).__name__} cannot act as a teacher")


@teacher_scores.register(ClassifierModel)
def _(teacher: ClassifierModel, x: numpy.typing.ArrayLike) -> FloatArray:
    return numpy.atleast_2d(models.logits(teacher, x))


@teacher_scores.register(ViLSurrogate)
def _(teacher: ViLSurrogate, x: numpy.typing.ArrayLike) -> FloatArray:
    return similarities(teacher.encoder, teacher.bank, x)


def teacher_signal(
    x: numpy.typing.ArrayLike,
    is_queried: bool,
    oracle_label: Optional[int],
    teacher: Any,
    tau: float,
    cfg: AdlConfig,
) -> TeacherSignal:
    if is_queried and oracle_label is None:
        raise ContractError("a queried sample needs its oracle label")
    scores = teacher_scores(teacher, numpy.asarray(x, dtype=numpy.float64))[0]
    if is_queried:
        assert oracle_label is not None
        return TeacherSignal(diffcore.one_hot(oracle_label, scores.size), cfg.beta_q)
    return TeacherSignal(diffcore.softmax(scores, tau), cfg.beta)


def teacher_signals(
    teacher: Any,
    pool: numpy.typing.ArrayLike,
    queried: Queried,
    tau: float,
    cfg: AdlConfig,
    indices: Optional[Sequence[int]] = None,
) -> Tuple[FloatArray, FloatArray]:
    """Teacher distributions and weights for ``pool[indices]`` (the whole pool by default)."""
    x = numpy.atleast_2d(numpy.asarray(pool, dtype=numpy.float64))
    rows = numpy.arange(x.shape[0]) if indices is None else numpy.asarray(indices, dtype=numpy.int64)
    for index in queried:
        if not 0 <= index < x.shape[0]:
            raise InvalidInputError(f"queried index {index} outside the pool of {x.shape[0]}")
    distributions = diffcore.softmax(teacher_scores(teacher, x[rows]), tau)
    weights = numpy.full(rows.size, cfg.beta)
    for row, index in enumerate(rows.tolist()):
        if index in queried:
            distributions[row] = diffcore.one_hot(queried[index], distributions.shape[1])
            weights[row] = cfg.beta_q
    return distributions, weights


def top_confident_indices(probs: numpy.typing.ArrayLike, top_n: int) -> IntArray:
    """Per predicted class, the ``top_n`` most confident rows; ties go to the smallest index."""
    prob_arr = numpy.atleast_2d(numpy.asarray(probs, dtype=numpy.float64))
    if prob_arr.shape[0] == 0:
        raise InvalidInputError("cannot select confident samples from an empty pool")
    assigned = prob_arr.argmax(axis=1)
    confidence = prob_arr.max(axis=1)
    selected: List[IntArray] = []
    for k in range(prob_arr.shape[1]):
        members = numpy.flatnonzero(assigned == k)
        order = numpy.lexsort((members, -confidence[members]))
        selected.append(members[order[:top_n]])
    return numpy.sort(numpy.concatenate(selected)).astype(numpy.int64)


def select_top_confident(target_model: ClassifierModel, pool: numpy.typing.ArrayLike, top_n: int) -> IntArray:
    return top_confident_indices(numpy.atleast_2d(models.predict(target_model, pool)), top_n)


def mean_entropy(probs: numpy.typing.ArrayLike) -> float:
    return float(diffcore.entropy_rows(probs).mean())


def diversity(probs: numpy.typing.ArrayLike) -> float:
    """``sum_k p_k log p_k`` of the mean prediction; equals ``KL(mean, uniform) - log C``."""
    mean = numpy.atleast_2d(numpy.asarray(probs, dtype=numpy.float64)).mean(axis=0)
    return -diffcore.entropy(mean)


def loss_ent(target_model: ClassifierModel, batch: numpy.typing.ArrayLike) -> float:
    return mean_entropy(numpy.atleast_2d(models.predict(target_model, batch)))


def loss_div(target_model: ClassifierModel, batch: numpy.typing.ArrayLike) -> float:
    return diversity(numpy.atleast_2d(models.predict(target_model, batch)))


def target_loss_and_grad(
    model: ClassifierModel,
    x: numpy.typing.ArrayLike,
    teacher: FloatArray,
    weights: FloatArray,
) -> Tuple[TargetTerms, FloatArray]:
    """Weighted distillation, entropy and diversity on one batch, with the flat parameter gradient."""
    batch = numpy.atleast_2d(numpy.asarray(x, dtype=numpy.float64))
    n = batch.shape[0]
    log_probs = diffcore.log_softmax(models.logits(model, batch))
    probs = numpy.exp(log_probs)
    dist = float((weights * -(teacher * log_probs).sum(axis=1)).mean())
    ent_rows = -(probs * log_probs).sum(axis=1)
    mean = probs.mean(axis=0)
    log_mean = numpy.log(numpy.maximum(mean, diffcore.LOG_CLAMP))
    div = float((mean * log_mean).sum())
    grad = models.soft_target_grad(probs, teacher, weights)
    grad -= probs * (log_probs + ent_rows[:, None]) / n
    grad += probs * (log_mean[None, :] - (probs * log_mean).sum(axis=1, keepdims=True)) / n
    ent = float(ent_rows.mean())
    return TargetTerms(dist + ent + div, dist, ent, div), models.backward(model, batch, grad)


def prompt_loss_and_grad(
    bank: PromptBank,
    features: FloatArray,
    teacher: FloatArray,
    weights: FloatArray,
    kg_weight: float = 1.0,
) -> Tuple[PromptTerms, FloatArray]:
    """Weighted distillation into the surrogate plus the anchor term, with the context gradient.

    ``features`` are already-encoded images.

    """
    sims = features @ text_embeddings(bank).T
    log_probs = diffcore.log_softmax(sims, bank.tau)
    probs = numpy.exp(log_probs)
    dist = float((weights * -(teacher * log_probs).sum(axis=1)).mean())
    kg = loss_kg(bank)
    grad_sims = models.soft_target_grad(probs, teacher, weights) / bank.tau
    grad = prompt_gradient(bank, features, grad_sims, kg_weight)
    return PromptTerms(dist + kg_weight * kg, dist, kg), grad


def _union(top: Sequence[int], queried: Queried) -> IntArray:
    return numpy.array(sorted(set(int(idx) for idx in top) | set(queried)), dtype=numpy.int64)


def loss_dist_v_from_t(
    bank: PromptBank,
    enc: FrozenEncoder,
    target_model: ClassifierModel,
    pool: numpy.typing.ArrayLike,
    top: Sequence[int],
    queried: Queried,
    cfg: AdlConfig,
) -> float:
    """Distillation of the target model's soft labels on ``top`` and oracle labels on ``queried``."""
    x = numpy.atleast_2d(numpy.asarray(pool, dtype=numpy.float64))
    rows = _union(top, queried)
    if rows.size == 0:
        raise InvalidInputError("neither confident nor queried samples to distill from")
    teacher, weights = teacher_signals(target_model, x, queried, 1.0, cfg, rows)
    features = numpy.atleast_2d(encode_image(enc, x[rows]))
    return prompt_loss_and_grad(bank, features, teacher, weights, kg_weight=0.0)[0].dist


def loss_dist_t_from_v(
    target_model: ClassifierModel,
    bank: PromptBank,
    enc: FrozenEncoder,
    pool: numpy.typing.ArrayLike,
    queried: Queried,
    cfg: AdlConfig,
) -> float:
    """Distillation of the surrogate's hard pseudo-labels (and oracle labels) into the target model."""
    teacher, weights = teacher_signals(ViLSurrogate(enc, bank), pool, queried, cfg.tau_hard, cfg)
    return target_loss_and_grad(target_model, pool, teacher, weights)[0].dist


def loss_t(
    target_model: ClassifierModel,
    bank: PromptBank,
    enc: FrozenEncoder,
    pool: numpy.typing.ArrayLike,
    queried: Queried,
    cfg: AdlConfig,
) -> float:
    teacher, weights = teacher_signals(ViLSurrogate(enc, bank), pool, queried, cfg.tau_hard, cfg)
    return target_loss_and_grad(target_model, pool, teacher, weights)[0].total


def loss_v(
    bank: PromptBank,
    enc: FrozenEncoder,
    target_model: ClassifierModel,
    pool: numpy.typing.ArrayLike,
    top: Sequence[int],
    queried: Queried,
    cfg: AdlConfig,
) -> float:
    return loss_dist_v_from_t(bank, enc, target_model, pool, top, queried, cfg) + loss_kg(bank)


def _target_lr(epoch: int, cfg: AdlConfig) -> float:
    return cfg.target_lr * diffcore.cosine_annealing(epoch - 1, cfg.epochs)


def _target_phase(
    model: ClassifierModel,
    x: FloatArray,
    teacher: FloatArray,
    weights: FloatArray,
    batch_size: int,
    lr: float,
    optimizer: diffcore.SgdMomentum,
    rng: numpy.random.Generator,
    epoch: int,
) -> Tuple[ClassifierModel, TargetTerms]:
    theta = model.flat()
    n = x.shape[0]
    totals = numpy.zeros(4)
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        terms, grad = target_loss_and_grad(model.with_flat(theta), x[idx], teacher[idx], weights[idx])
        if not math.isfinite(terms.total):
            raise NumericError("target-model loss is not finite", epoch=epoch, phase="target")
        theta = optimizer.step(theta, grad, lr)
        totals += numpy.array(terms) * idx.size
    return model.with_flat(theta), TargetTerms(*(float(value) for value in totals / n))


def _prompt_phase(
    bank: PromptBank,
    features: FloatArray,
    teacher: FloatArray,
    weights: FloatArray,
    batch_size: int,
    lr: float,
    optimizer: diffcore.SgdMomentum,
    rng: numpy.random.Generator,
    epoch: int,
) -> Tuple[PromptBank, PromptTerms]:
    context = bank.context.copy()
    n = features.shape[0]
    totals = numpy.zeros(3)
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        terms, grad = prompt_loss_and_grad(bank.with_context(context), features[idx], teacher[idx], weights[idx])
        if not math.isfinite(terms.total):
            raise NumericError("prompt loss is not finite", epoch=epoch, phase="prompt")
        context = optimizer.step(context, grad, lr)
        totals += numpy.array(terms) * idx.size
    return bank.with_context(context), PromptTerms(*(float(value) for value in totals / n))


def adapt(
    target_model: ClassifierModel,
    bank: PromptBank,
    enc: FrozenEncoder,
    target_x: numpy.typing.ArrayLike,
    queried: Queried,
    cfg: AdlConfig,
    monitor: Optional[Monitor] = None,
) -> AdaptResult:
    """Alternate target-model and prompt updates for ``cfg.epochs`` epochs.

    ``queried`` maps pool indices to oracle labels. The returned model is the
    inference artifact; the returned bank is for analysis only. ``monitor``
    is called after every epoch and may return extra metrics for that epoch.

    """
    x = numpy.atleast_2d(numpy.asarray(target_x, dtype=numpy.float64))
    if x.shape[0] == 0:
        raise InvalidInputError("the target pool is empty")
    features = numpy.atleast_2d(encode_image(enc, x))
    unlabeled = numpy.array([idx not in queried for idx in range(x.shape[0])])
    rng = numpy.random.default_rng([cfg.seed, 50])
    target_optimizer = diffcore.SgdMomentum(cfg.target_momentum, cfg.target_weight_decay)
    prompt_optimizer = diffcore.SgdMomentum(cfg.prompt_momentum)
    model = target_model
    metrics: List[Dict[str, float]] = []
    for epoch in range(1, cfg.epochs + 1):
        surrogate = ViLSurrogate(enc, bank)
        t_teacher, t_weights = teacher_signals(surrogate, x, queried, cfg.tau_hard, cfg)
        agreement = (
            float((models.logits(model, x[unlabeled]).argmax(axis=1) == t_teacher[unlabeled].argmax(axis=1)).mean())
            if unlabeled.any()
            else 1.0
        )
        if cfg.update_prompts:
            top = select_top_confident(model, x, cfg.top_n)
            rows = _union(top, queried)

        lr = _target_lr(epoch, cfg)
        model, t_terms = _target_phase(
            model, x, t_teacher, t_weights, cfg.batch_size, lr, target_optimizer, rng, epoch
        )
        entry: Dict[str, float] = {
            "epoch": epoch,
            "target_lr": lr,
            "loss_t": t_terms.total,
            "dist_t": t_terms.dist,
            "ent": t_terms.ent,
            "div": t_terms.div,
            "agreement": agreement,
        }

        if cfg.update_prompts:
            # The prompts learn from the target model as updated above.
            v_teacher, v_weights = teacher_signals(model, x, queried, 1.0, cfg, rows)
            bank, v_terms = _prompt_phase(
                bank, features[rows], v_teacher, v_weights, cfg.batch_size, cfg.prompt_lr, prompt_optimizer, rng, epoch
            )
            entry.update({"loss_v": v_terms.total, "dist_v": v_terms.dist, "kg": v_terms.kg, "top_size": float(top.size)})

        if monitor is not None:
            entry.update(monitor(epoch, model, ViLSurrogate(enc, bank)) or {})
        logger.info(
            "adl epoch %d/%d: %s",
            epoch,
            cfg.epochs,
            ", ".join(f"{key} {value:.4g}" for key, value in entry.items() if key != "epoch"),
        )
        metrics.append(entry)
    return AdaptResult(model, bank, metrics)


def fine_tune_active(
    target_model: ClassifierModel,
    target_x: numpy.typing.ArrayLike,
    queried: Queried,
    cfg: AdlConfig,
    monitor: Optional[Monitor] = None,
) -> AdaptResult:
    """Adapt without a surrogate: weighted cross-entropy on the queried samples plus entropy and diversity."""
    x = numpy.atleast_2d(numpy.asarray(target_x, dtype=numpy.float64))
    if x.shape[0] == 0:
        raise InvalidInputError("the target pool is empty")
    classes = target_model.classes
    teacher = numpy.zeros((x.shape[0], classes))
    weights = numpy.zeros(x.shape[0])
    for index, label in queried.items():
        if not 0 <= index < x.shape[0]:
            raise InvalidInputError(f"queried index {index} outside the pool of {x.shape[0]}")
        teacher[index] = diffcore.one_hot(label, classes)
        weights[index] = cfg.beta_q
    rng = numpy.random.default_rng([cfg.seed, 50])
    optimizer = diffcore.SgdMomentum(cfg.target_momentum, cfg.target_weight_decay)
    model = target_model
    metrics: List[Dict[str, float]] = []
    for epoch in range(1, cfg.epochs + 1):
        lr = _target_lr(epoch, cfg)
        model, terms = _target_phase(model, x, teacher, weights, cfg.batch_size, lr, optimizer, rng, epoch)
        entry: Dict[str, float] = {
            "epoch": epoch,
            "target_lr": lr,
            "loss_t": terms.total,
            "dist_t": terms.dist,
            "ent": terms.ent,
            "div": terms.div,
        }
        if monitor is not None:
            entry.update(monitor(epoch, model, None) or {})
        logger.info("active fine-tune epoch %d/%d loss %.6f", epoch, cfg.epochs, terms.total)
        metrics.append(entry)
    return AdaptResult(model, None, metrics)
