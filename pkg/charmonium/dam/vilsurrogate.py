"""A frozen vision-language surrogate with learnable prompt context.

Images are encoded with a frozen random-Fourier-feature map. Class text
embeddings are ``w_k = normalize(c_k + P mean(v))``: fixed class tokens
``c_k``, a frozen orthogonal mixing map ``P``, and context vectors ``v``
shared across classes, which are the only trainable state.

"""
from __future__ import annotations

import contextlib
import contextvars
import logging
import math
from dataclasses import dataclass, replace
from typing import Generator, NamedTuple

import numpy
import numpy.typing

from . import diffcore
from .datagen import DomainDataset
from .errors import (
    InvalidDataError,
    InvalidParameterError,
    ParamFileError,
    ShapeError,
    SurrogateDiscardedError,
)
from .util import FloatArray, PathLike, read_param_file, readonly, write_param_file

logger = logging.getLogger("charmonium.dam")

BANK_FILE_KIND = "charmonium.dam prompt-bank"
ENCODER_FILE_KIND = "charmonium.dam encoder"

_surrogate_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "surrogate_enabled", default=True
)


@contextlib.contextmanager
def surrogate_disabled() -> Generator[None, None, None]:
    """Any surrogate evaluation inside this block raises SurrogateDiscardedError."""
    token = _surrogate_enabled.set(False)
    try:
        yield
    finally:
        _surrogate_enabled.reset(token)


def _check_enabled() -> None:
    if not _surrogate_enabled.get():
        raise SurrogateDiscardedError("the surrogate was discarded; only the target model may predict here")


@dataclass(frozen=True, eq=False)
class FrozenEncoder:
    omega: FloatArray
    phase: FloatArray

    def __post_init__(self) -> None:
        omega = readonly(self.omega)
        phase = readonly(self.phase)
        if omega.ndim != 2 or phase.shape != (omega.shape[1],):
            raise ShapeError(f"encoder projection {omega.shape} does not match phase {phase.shape}")
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "phase", phase)

    @property
    def input_dim(self) -> int:
        return int(self.omega.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.omega.shape[1])


@dataclass(frozen=True, eq=False)
class PromptBank:
    context: FloatArray
    class_tokens: FloatArray
    mixing: FloatArray
    anchors: FloatArray
    tau: float = 0.05

    def __post_init__(self) -> None:
        arrays = {name: readonly(getattr(self, name)) for name in ("context", "class_tokens", "mixing", "anchors")}
        feature_dim = arrays["mixing"].shape[0]
        if arrays["mixing"].shape != (feature_dim, feature_dim):
            raise ShapeError(f"mixing map must be square, got {arrays['mixing'].shape}")
        for name in ("context", "class_tokens", "anchors"):
            if arrays[name].ndim != 2 or arrays[name].shape[1] != feature_dim:
                raise ShapeError(f"{name} must have {feature_dim} columns, got {arrays[name].shape}")
        if arrays["anchors"].shape != arrays["class_tokens"].shape:
            raise ShapeError("one anchor per class token is required")
        if not self.tau > 0:
            raise InvalidParameterError(f"temperature must be positive, got {self.tau}")
        for name, arr in arrays.items():
            object.__setattr__(self, name, arr)

    @property
    def classes(self) -> int:
        return int(self.class_tokens.shape[0])

    @property
    def context_length(self) -> int:
        return int(self.context.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.mixing.shape[0])

    @property
    def prompt_params(self) -> int:
        return int(self.context.size)

    def with_context(self, context: numpy.typing.ArrayLike) -> PromptBank:
        new_context = numpy.asarray(context, dtype=numpy.float64)
        if new_context.shape != self.context.shape:
            raise ShapeError(f"context must keep shape {self.context.shape}, got {new_context.shape}")
        return replace(self, context=new_context)


class ViLSurrogate(NamedTuple):
    encoder: FrozenEncoder
    bank: PromptBank


def median_pairwise_distance(x: FloatArray) -> float:
    sq_norms = (x**2).sum(axis=1)
    sq_dist = numpy.maximum(sq_norms[:, None] + sq_norms[None, :] - 2 * x @ x.T, 0.0)
    upper = numpy.triu_indices(x.shape[0], k=1)
    return float(numpy.median(numpy.sqrt(sq_dist[upper])))


def make_encoder(input_dim: int, feature_dim: int, length_scale: float, seed: int = 0) -> FrozenEncoder:
    if not length_scale > 0:
        raise InvalidParameterError(f"length-scale must be positive, got {length_scale}")
    rng = numpy.random.default_rng([seed, 21])
    return FrozenEncoder(
        rng.normal(0.0, 1.0 / length_scale, (input_dim, feature_dim)),
        rng.uniform(0.0, 2 * math.pi, feature_dim),
    )


def fit_encoder(
    foundation: DomainDataset, feature_dim: int = 64, seed: int = 0, max_points: int = 1000
) -> FrozenEncoder:
    """Random Fourier features whose length-scale is the foundation corpus' median pairwise distance."""
    rng = numpy.random.default_rng([seed, 20])
    points = foundation.samples
    if points.shape[0] > max_points:
        points = points[numpy.sort(rng.choice(points.shape[0], max_points, replace=False))]
    length_scale = median_pairwise_distance(points)
    logger.debug("encoder length-scale %.6f over %d points", length_scale, points.shape[0])
    return make_encoder(foundation.dim, feature_dim, length_scale, seed)


def encode_image(enc: FrozenEncoder, x: numpy.typing.ArrayLike) -> FloatArray:
    _check_enabled()
    arr = numpy.asarray(x, dtype=numpy.float64)
    batch = numpy.atleast_2d(arr)
    if batch.ndim != 2 or batch.shape[1] != enc.input_dim:
        raise ShapeError(f"encoder expects inputs of dimension {enc.input_dim}, got shape {arr.shape}")
    features = diffcore.normalize_rows(numpy.cos(batch @ enc.omega + enc.phase))
    return features[0] if arr.ndim == 1 else features


def make_prompt_bank(
    classes: int, feature_dim: int, context_length: int = 16, tau: float = 0.05, seed: int = 0
) -> PromptBank:
    """Zero context, a random orthogonal mixing map, and placeholder class tokens.

    The class tokens are replaced by ``init_anchors``.

    """
    if context_length < 1:
        raise InvalidParameterError(f"context length must be >= 1, got {context_length}")
    rng = numpy.random.default_rng([seed, 22])
    q, r = numpy.linalg.qr(rng.standard_normal((feature_dim, feature_dim)))
    mixing = q * numpy.where(numpy.diag(r) < 0, -1.0, 1.0)
    tokens = diffcore.normalize_rows(rng.standard_normal((classes, feature_dim)))
    return PromptBank(
        numpy.zeros((context_length, feature_dim)),
        tokens,
        mixing,
        diffcore.normalize_rows(tokens),
        tau,
    )


def init_anchors(bank: PromptBank, foundation: DomainDataset, enc: FrozenEncoder) -> PromptBank:
    """Class tokens from foundation-corpus class means; anchors from the tokens; zero context."""
    counts = numpy.bincount(foundation.labels, minlength=bank.classes)
    if foundation.num_classes != bank.classes or numpy.any(counts[: bank.classes] == 0):
        raise InvalidDataError(
            f"foundation corpus must cover all {bank.classes} classes, got counts {counts.tolist()}"
        )
    features = encode_image(enc, foundation.samples)
    sums = numpy.zeros((bank.classes, enc.feature_dim))
    numpy.add.at(sums, foundation.labels, features)
    tokens = diffcore.normalize_rows(sums / counts[:, None])
    anchors = diffcore.normalize_rows(tokens)
    if logger.isEnabledFor(logging.WARNING):
        gram = anchors @ anchors.T
        if numpy.any(numpy.isclose(gram[numpy.triu_indices(bank.classes, k=1)], 1.0)):
            logger.warning("two or more class anchors coincide")
    return replace(bank, context=numpy.zeros_like(bank.context), class_tokens=tokens, anchors=anchors)


def text_embeddings(bank: PromptBank) -> FloatArray:
    offset = bank.mixing @ bank.context.mean(axis=0)
    return diffcore.normalize_rows(bank.class_tokens + offset[None, :])


def text_embed(bank: PromptBank, k: int) -> FloatArray:
    if not 0 <= k < bank.classes:
        raise IndexError(f"class index {k} outside [0, {bank.classes})")
    return text_embeddings(bank)[k]


def similarities(enc: FrozenEncoder, bank: PromptBank, x: numpy.typing.ArrayLike) -> FloatArray:
    """Cosine similarity of each image feature with each class embedding, shape (n, C)."""
    features = numpy.atleast_2d(encode_image(enc, x))
    if enc.feature_dim != bank.feature_dim:
        raise ShapeError(f"encoder emits {enc.feature_dim} features, bank expects {bank.feature_dim}")
    return features @ text_embeddings(bank).T


def vil_predict(enc: FrozenEncoder, bank: PromptBank, x: numpy.typing.ArrayLike) -> FloatArray:
    probs = diffcore.softmax(similarities(enc, bank, x), bank.tau)
    return probs[0] if numpy.ndim(x) == 1 else probs


def zero_shot_predict(enc: FrozenEncoder, bank: PromptBank, x: numpy.typing.ArrayLike) -> FloatArray:
    """Predictions with the template anchors, ignoring the current context."""
    features = numpy.atleast_2d(encode_image(enc, x))
    probs = diffcore.softmax(features @ bank.anchors.T, bank.tau)
    return probs[0] if numpy.ndim(x) == 1 else probs


def loss_kg(bank: PromptBank) -> float:
    """(1/C) sum_k ||w_k - w_k^0||^2."""
    return float(((text_embeddings(bank) - bank.anchors) ** 2).sum() / bank.classes)


def prompt_gradient(
    bank: PromptBank, features: FloatArray, grad_sims: FloatArray, kg_weight: float = 1.0
) -> FloatArray:
    """Gradient w.r.t. the context of ``sum(grad_sims * sims) + kg_weight * L_kg``.

    ``features`` are the encoded images behind ``grad_sims`` (shape ``(n, D)``
    and ``(n, C)``). Every context vector receives the same gradient, since
    only their mean enters the text embeddings.

    """
    raw = bank.class_tokens + (bank.mixing @ bank.context.mean(axis=0))[None, :]
    norms = numpy.linalg.norm(raw, axis=1, keepdims=True)
    embeddings = raw / norms
    grad_w = grad_sims.T @ features + kg_weight * (2.0 / bank.classes) * (embeddings - bank.anchors)
    grad_raw = (grad_w - (grad_w * embeddings).sum(axis=1, keepdims=True) * embeddings) / norms
    grad_mean = bank.mixing.T @ grad_raw.sum(axis=0)
    return numpy.tile(grad_mean / bank.context_length, (bank.context_length, 1))


def save_prompt_bank(bank: PromptBank, path: PathLike) -> None:
    write_param_file(
        path,
        BANK_FILE_KIND,
        {"classes": bank.classes, "feature_dim": bank.feature_dim, "context_length": bank.context_length, "tau": repr(bank.tau)},
        [
            ("context", "learnable", bank.context),
            ("class_tokens", "frozen", bank.class_tokens),
            ("mixing", "frozen", bank.mixing),
            ("anchors", "frozen", bank.anchors),
        ],
    )


def load_prompt_bank(path: PathLike) -> PromptBank:
    header, sections = read_param_file(path, BANK_FILE_KIND)
    try:
        roles = {name: section.role for name, section in sections.items()}
        if roles != {"context": "learnable", "class_tokens": "frozen", "mixing": "frozen", "anchors": "frozen"}:
            raise ParamFileError(f"{path}: unexpected sections {roles}")
        return PromptBank(
            sections["context"].values,
            sections["class_tokens"].values,
            sections["mixing"].values,
            sections["anchors"].values,
            float(header["tau"]),
        )
    except KeyError as exc:
        raise ParamFileError(f"{path}: missing {exc}") from exc


def save_encoder(enc: FrozenEncoder, path: PathLike) -> None:
    write_param_file(
        path,
        ENCODER_FILE_KIND,
        {"input_dim": enc.input_dim, "feature_dim": enc.feature_dim},
        [("omega", "frozen", enc.omega), ("phase", "frozen", enc.phase)],
    )


def load_encoder(path: PathLike) -> FrozenEncoder:
    _, sections = read_param_file(path, ENCODER_FILE_KIND)
    try:
        return FrozenEncoder(sections["omega"].values, sections["phase"].values)
    except KeyError as exc:
        raise ParamFileError(f"{path}: missing {exc}") from exc
