"""Deterministic, process-independent digests of configs, arrays and sources.

Objects are first frozen into nested tuples of primitives, then hashed with a
fixed-width blake2s fold. Python's builtin ``hash`` is salted per process, so
it cannot be used for anything stored in a RunRecord.

"""
from __future__ import annotations

import functools
import hashlib
import logging
import pathlib
import struct
from dataclasses import fields
from typing import Any, Hashable, Mapping, Sequence

import numpy
from typing_extensions import Protocol

from .config import Config
from .errors import InvalidParameterError, UnfreezableTypeError
from .util import int_to_bytes

logger = logging.getLogger("charmonium.dam")


class Hasher(Protocol):
    def __call__(self, obj: bytes) -> int:
        pass


class Blake2sHasher(Hasher):
    """Keyless blake2s truncated to ``digest_bits``."""

    def __init__(self, digest_bits: int = 64) -> None:
        if digest_bits % 8 != 0 or not 8 <= digest_bits <= 256:
            raise InvalidParameterError(f"digest width must be a multiple of 8 in [8, 256], got {digest_bits}")
        self.digest_size = digest_bits // 8

    def __call__(self, obj: bytes) -> int:
        return int.from_bytes(hashlib.blake2s(obj, digest_size=self.digest_size).digest(), "big")


default_hasher = Blake2sHasher()


@functools.singledispatch
def freeze(obj: Any) -> Hashable:
    "Deterministically maps configs, arrays and plain containers to nested tuples."
    raise UnfreezableTypeError(
        f"cannot fingerprint objects of type {type(obj).__name__}"
    )


@freeze.register(type(None))
@freeze.register(bool)
@freeze.register(int)
@freeze.register(float)
@freeze.register(str)
@freeze.register(bytes)
def _(obj: Any) -> Hashable:
    return obj


@freeze.register(list)
@freeze.register(tuple)
def _(obj: Sequence[Any]) -> Hashable:
    return tuple(freeze(elem) for elem in obj)


@freeze.register(dict)
def _(obj: Mapping[str, Any]) -> Hashable:
    # sorted so that insertion order never leaks into the digest
    return tuple(sorted((str(key), freeze(val)) for key, val in obj.items()))


@freeze.register(numpy.ndarray)
def _(obj: numpy.ndarray) -> Hashable:  # type: ignore[type-arg]
    contiguous = numpy.ascontiguousarray(obj)
    return (b"ndarray", str(contiguous.dtype), tuple(contiguous.shape), contiguous.tobytes())


@freeze.register(numpy.generic)
def _(obj: numpy.generic) -> Hashable:
    return freeze(obj.item())


@freeze.register(Config)
def _(obj: Config) -> Hashable:
    return (
        type(obj).__name__,
        tuple((field.name, freeze(getattr(obj, field.name))) for field in fields(obj)),
    )


def hash_frozen(frozen: Hashable, hasher: Hasher = default_hasher) -> int:
    # Each leaf is tagged with its type so that, e.g., 1, 1.0, True and "1" differ.
    if frozen is None:
        return hasher(b"n")
    elif isinstance(frozen, bool):
        return hasher(b"b" + bytes([frozen]))
    elif isinstance(frozen, int):
        return hasher(b"i" + int_to_bytes(frozen))
    elif isinstance(frozen, float):
        return hasher(b"f" + struct.pack("!d", frozen))
    elif isinstance(frozen, str):
        return hasher(b"s" + frozen.encode())
    elif isinstance(frozen, bytes):
        return hasher(b"y" + frozen)
    elif isinstance(frozen, tuple):
        ret = hasher(b"t" + int_to_bytes(len(frozen)))
        for elem in frozen:
            ret = hasher(int_to_bytes(ret) + int_to_bytes(hash_frozen(elem, hasher)))
        return ret
    else:
        raise UnfreezableTypeError(f"{type(frozen).__name__} is not a frozen value")


def fingerprint(obj: Any, hasher: Hasher = default_hasher) -> str:
    """Hex digest of ``obj`` that is stable across processes and platforms."""
    logger.debug("fingerprint begin %s", type(obj).__name__)
    ret = hash_frozen(freeze(obj), hasher)
    width = getattr(hasher, "digest_size", 8) * 2
    return f"{ret:0{width}x}"


def source_fingerprint(package_dir: pathlib.Path = pathlib.Path(__file__).parent) -> str:
    """Digest of every Python source in the package, keyed by relative path."""
    sources = {
        str(path.relative_to(package_dir)): path.read_bytes()
        for path in sorted(package_dir.rglob("*.py"))
    }
    return fingerprint(sources)
