from __future__ import annotations

import pathlib
from typing import Dict, Iterable, List, Mapping, NamedTuple, Sequence, Tuple, TypeVar, Union

import numpy
import numpy.typing

from .errors import ParamFileError

_T = TypeVar("_T")

FloatArray = numpy.typing.NDArray[numpy.float64]
IntArray = numpy.typing.NDArray[numpy.int64]
PathLike = Union[str, pathlib.Path]


def common_prefix(it0: Iterable[_T], it1: Iterable[_T]) -> tuple[_T, ...]:
    ret: tuple[_T, ...] = ()
    for elem0, elem1 in zip(it0, it1):
        if elem0 == elem1:
            ret = (*ret, elem0)
        else:
            break
    return ret


def int_to_bytes(obj: int) -> bytes:
    return obj.to_bytes(
        length=(8 + (obj + (obj < 0)).bit_length()) // 8,
        byteorder="big",
        signed=True,
    )


def readonly(array: numpy.typing.ArrayLike) -> FloatArray:
    """Copy into a float64 array that refuses in-place writes."""
    ret = numpy.array(array, dtype=numpy.float64)
    ret.flags.writeable = False
    return ret


class ParamSection(NamedTuple):
    role: str
    values: FloatArray


PARAM_ROLES = ("learnable", "frozen")


def write_param_file(
    path: PathLike,
    kind: str,
    header: Mapping[str, object],
    sections: Sequence[Tuple[str, str, FloatArray]],
) -> None:
    """Write named arrays as a flat text file.

    Floats are written with ``repr``, which round-trips 64-bit values exactly.

    """
    lines: List[str] = [f"# {kind}"]
    lines.extend(f"{key}={value}" for key, value in header.items())
    for name, role, values in sections:
        if role not in PARAM_ROLES:
            raise ParamFileError(f"unknown role {role!r} for section {name!r}")
        shape = ",".join(str(dim) for dim in values.shape)
        lines.append(f"[{name}] {role} shape={shape}")
        lines.extend(repr(float(value)) for value in values.ravel())
    pathlib.Path(path).write_text("\n".join(lines) + "\n")


def read_param_file(
    path: PathLike, kind: str
) -> Tuple[Dict[str, str], Dict[str, ParamSection]]:
    lines = pathlib.Path(path).read_text().splitlines()
    if not lines or lines[0] != f"# {kind}":
        raise ParamFileError(f"{path}: expected a '# {kind}' header")
    header: Dict[str, str] = {}
    sections: Dict[str, ParamSection] = {}
    line_no = 1
    while line_no < len(lines) and not lines[line_no].startswith("["):
        key, sep, value = lines[line_no].partition("=")
        if not sep:
            raise ParamFileError(f"{path}:{line_no + 1}: expected key=value")
        header[key] = value
        line_no += 1
    while line_no < len(lines):
        title = lines[line_no]
        try:
            name_part, role, shape_part = title.split(" ")
            name = name_part.strip("[]")
            shape = tuple(int(dim) for dim in shape_part[len("shape=") :].split(",") if dim)
        except ValueError as exc:
            raise ParamFileError(f"{path}:{line_no + 1}: bad section title {title!r}") from exc
        if role not in PARAM_ROLES:
            raise ParamFileError(f"{path}:{line_no + 1}: unknown role {role!r}")
        size = int(numpy.prod(shape)) if shape else 1
        raw = lines[line_no + 1 : line_no + 1 + size]
        if len(raw) != size:
            raise ParamFileError(f"{path}: section {name!r} is truncated")
        try:
            values = numpy.array([float(value) for value in raw], dtype=numpy.float64)
        except ValueError as exc:
            raise ParamFileError(f"{path}: section {name!r} has a non-numeric entry") from exc
        sections[name] = ParamSection(role, values.reshape(shape))
        line_no += 1 + size
    return header, sections
