from __future__ import annotations

from typing import Optional


class DamError(Exception):
    pass


class InvalidParameterError(DamError, ValueError):
    pass


class ConfigError(InvalidParameterError):
    pass


class InvalidInputError(DamError, ValueError):
    pass


class InvalidDataError(InvalidInputError):
    pass


class ShapeError(DamError, ValueError):
    pass


class NumericError(DamError, ArithmeticError):
    def __init__(
        self, message: str, epoch: Optional[int] = None, phase: Optional[str] = None
    ) -> None:
        where = []
        if epoch is not None:
            where.append(f"epoch {epoch}")
        if phase is not None:
            where.append(f"phase {phase}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.epoch = epoch
        self.phase = phase


class DuplicateQueryError(DamError, KeyError):
    pass


class BudgetExhaustedError(DamError):
    pass


class ContractError(DamError, AssertionError):
    pass


class DatasetParseError(DamError, ValueError):
    def __init__(self, message: str, line: int, field: Optional[int] = None) -> None:
        location = f"line {line}" if field is None else f"line {line}, field {field}"
        super().__init__(f"{location}: {message}")
        self.line = line
        self.field = field


class DatasetValidationError(InvalidDataError):
    def __init__(self, message: str, row: int) -> None:
        super().__init__(f"row {row}: {message}")
        self.row = row


class ParamFileError(DamError, ValueError):
    pass


class MixedConfigError(DamError):
    def __init__(self, message: str, diff: str) -> None:
        super().__init__(f"{message}\n{diff}")
        self.diff = diff


class SurrogateDiscardedError(DamError, RuntimeError):
    pass


class UnfreezableTypeError(DamError, NotImplementedError):
    pass
