"""Path-wise diffs of resolved configs, for diagnosing records that cannot be aggregated together."""
from __future__ import annotations

import dataclasses
from typing import Any, Iterable, Mapping, Sequence, Tuple

from .config import Config
from .util import common_prefix

Difference = Tuple["ObjectLocation", "ObjectLocation"]

MISSING_KEY = "no such key"


@dataclasses.dataclass
class ObjectLocation:
    labels: tuple[str, ...]
    objects: tuple[object, ...]

    @staticmethod
    def create(label: int, obj: object) -> ObjectLocation:
        return ObjectLocation((f"obj{label}",), (obj,))

    def append(self, label: str, obj: object) -> ObjectLocation:
        return self.__class__((*self.labels, label), (*self.objects, obj))

    @property
    def tail(self) -> object:
        return self.objects[-1]

    @property
    def path(self) -> tuple[str, ...]:
        """Labels below the root ``objN``."""
        return self.labels[1:]


def _as_tree(obj: Any) -> Any:
    return obj.to_dict() if isinstance(obj, Config) else obj


def _shared_path(differences: Sequence[Difference]) -> tuple[str, ...]:
    shared = differences[0][0].path
    for left, right in differences:
        shared = common_prefix(common_prefix(shared, left.path), right.path)
    return shared


def summarize_diffs(obj0: Any, obj1: Any) -> str:
    """Path-wise description of how two configs (or their dicts) differ.

    >>> print(summarize_diffs({"adl": {"epochs": 30, "top_n": 16}}, {"adl": {"epochs": 10, "top_n": 8}}))
    let obj0_sub = obj0.adl
    let obj1_sub = obj1.adl
    obj0_sub.epochs == 30
    obj1_sub.epochs == 10
    obj0_sub.top_n == 16
    obj1_sub.top_n == 8

    """
    differences = list(iterate_diffs(obj0, obj1))
    if not differences:
        return "no differences"
    shared = _shared_path(differences)
    lines = [f"let obj{side}_sub = obj{side}{''.join(shared)}" for side in (0, 1)]
    for left, right in differences:
        rest = "".join(left.path[len(shared) :])
        lines.append(f"obj0_sub{rest} == {left.tail}")
        lines.append(f"obj1_sub{rest} == {right.tail}")
    return "\n".join(lines)


def iterate_diffs(obj0: Any, obj1: Any) -> Iterable[Difference]:
    return recursive_find_diffs(
        ObjectLocation.create(0, _as_tree(obj0)),
        ObjectLocation.create(1, _as_tree(obj1)),
    )


def _mapping_diffs(obj0: ObjectLocation, obj1: ObjectLocation) -> Iterable[Difference]:
    left: Mapping[str, Any] = obj0.tail  # type: ignore[assignment]
    right: Mapping[str, Any] = obj1.tail  # type: ignore[assignment]
    for key in sorted(left.keys() - right.keys()):
        yield obj0.append(f".{key}", left[key]), obj1.append(f".{key}", MISSING_KEY)
    for key in sorted(right.keys() - left.keys()):
        yield obj0.append(f".{key}", MISSING_KEY), obj1.append(f".{key}", right[key])
    for key in sorted(left.keys() & right.keys()):
        yield from recursive_find_diffs(obj0.append(f".{key}", left[key]), obj1.append(f".{key}", right[key]))


def _sequence_diffs(obj0: ObjectLocation, obj1: ObjectLocation) -> Iterable[Difference]:
    left: Sequence[Any] = obj0.tail  # type: ignore[assignment]
    right: Sequence[Any] = obj1.tail  # type: ignore[assignment]
    if len(left) != len(right):
        yield obj0.append(".__len__()", len(left)), obj1.append(".__len__()", len(right))
    for idx, (elem0, elem1) in enumerate(zip(left, right)):
        yield from recursive_find_diffs(obj0.append(f"[{idx}]", elem0), obj1.append(f"[{idx}]", elem1))


def recursive_find_diffs(obj0: ObjectLocation, obj1: ObjectLocation) -> Iterable[Difference]:
    if type(obj0.tail) is not type(obj1.tail):
        yield (
            obj0.append(".__class__", type(obj0.tail).__name__),
            obj1.append(".__class__", type(obj1.tail).__name__),
        )
    elif isinstance(obj0.tail, Mapping):
        yield from _mapping_diffs(obj0, obj1)
    elif isinstance(obj0.tail, (list, tuple)):
        yield from _sequence_diffs(obj0, obj1)
    elif obj0.tail != obj1.tail:
        yield obj0, obj1
