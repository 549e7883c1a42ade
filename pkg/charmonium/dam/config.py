from __future__ import annotations

import typing
from dataclasses import dataclass, fields
from typing import Any, ClassVar, Dict, FrozenSet, List, Mapping, Tuple, Type, TypeVar

import toml

from .errors import ConfigError

_C = TypeVar("_C", bound="Config")


@dataclass
class Config:
    """Base for every typed configuration.

    Assigning an attribute that is not a declared field raises, so a typo in
    an override cannot silently create new state. Subclasses check their
    invariants in ``validate``, which runs on construction (including
    ``dataclasses.replace``).

    """

    # Subclasses with list-valued fields coerce them to tuples on load.
    tuple_fields: ClassVar[FrozenSet[str]] = frozenset()

    def __setattr__(self, attr: str, val: Any) -> None:
        if attr in {field.name for field in fields(self.__class__)}:
            object.__setattr__(self, attr, val)
        else:
            raise AttributeError(f"{attr} does not exist on {self.__class__.__name__}")

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        pass

    def to_dict(self) -> Dict[str, Any]:
        ret: Dict[str, Any] = {}
        for field in fields(self):
            val = getattr(self, field.name)
            if isinstance(val, Config):
                ret[field.name] = val.to_dict()
            elif isinstance(val, tuple):
                ret[field.name] = list(val)
            else:
                ret[field.name] = val
        return ret

    @classmethod
    def from_dict(cls: Type[_C], data: Mapping[str, Any]) -> _C:
        hints = typing.get_type_hints(cls)
        known = {field.name for field in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
        kwargs: Dict[str, Any] = {}
        for name, val in data.items():
            hint = hints[name]
            if isinstance(hint, type) and issubclass(hint, Config):
                if not isinstance(val, Mapping):
                    raise ConfigError(f"{cls.__name__}.{name} must be a table")
                kwargs[name] = hint.from_dict(val)
            elif name in cls.tuple_fields:
                kwargs[name] = tuple(val)
            else:
                kwargs[name] = val
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(f"cannot build {cls.__name__}: {exc}") from exc


def parse_override(override: str) -> Tuple[List[str], Any]:
    """Parse ``a.b.c=value``; the value is read as a TOML value, falling back to a bare string."""
    key, sep, raw = override.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override {override!r} is not of the form key.path=value")
    try:
        value = toml.loads(f"value = {raw.strip()}")["value"]
    except toml.TomlDecodeError:
        value = raw.strip()
    return key.strip().split("."), value


def apply_overrides(data: Dict[str, Any], overrides: typing.Iterable[str]) -> Dict[str, Any]:
    for override in overrides:
        path, value = parse_override(override)
        node = data
        for segment in path[:-1]:
            child = node.setdefault(segment, {})
            if not isinstance(child, dict):
                raise ConfigError(f"override {override!r} descends into a non-table")
            node = child
        node[path[-1]] = value
    return data


def merge_tables(base: Dict[str, Any], update: Mapping[str, Any]) -> Dict[str, Any]:
    for key, val in update.items():
        if isinstance(val, Mapping) and isinstance(base.get(key), dict):
            merge_tables(base[key], val)
        else:
            base[key] = val
    return base


def load_config(
    cls: Type[_C],
    text: str = "",
    overrides: typing.Iterable[str] = (),
) -> _C:
    """Materialize ``cls`` from TOML text plus dotted overrides on top of its defaults."""
    try:
        data = toml.loads(text) if text else {}
    except toml.TomlDecodeError as exc:
        raise ConfigError(f"config file is not valid TOML: {exc}") from exc
    resolved = merge_tables(cls().to_dict(), data)
    apply_overrides(resolved, overrides)
    return cls.from_dict(resolved)
