# SPDX-License-Identifier: Apache-2.0
"""
Exception hierarchy.  Every error carries a stable ``kind`` and a human
``detail``; the CLI turns them into one machine-parseable stderr line.
"""

from __future__ import annotations


class TempoError(Exception):
    kind = "tempo_error"

    def __init__(self, detail: str) -> None:
        super().__init__(detail)
        self.detail = detail

    def one_line(self) -> str:
        detail = self.detail.replace('"', "'").replace("\n", " ")
        return f'error kind={self.kind} detail="{detail}"'


class DimensionError(TempoError):
    """Shape disagreement; ``axis`` names the offending axis when known."""

    kind = "dimension"

    def __init__(self, detail: str, axis: str | int | None = None) -> None:
        if axis is not None:
            detail = f"axis {axis}: {detail}"
        super().__init__(detail)
        self.axis = axis


class DomainError(TempoError):
    kind = "domain"


class NonFiniteError(TempoError):
    kind = "non_finite"

    def __init__(self, op: str) -> None:
        super().__init__(f"{op} produced NaN or Inf")
        self.op = op


class NonFiniteGradientError(TempoError):
    kind = "non_finite_gradient"

    def __init__(self, param: str, max_abs: float) -> None:
        super().__init__(f"gradient of {param} is not finite (max |g| = {max_abs!r})")
        self.param = param
        self.max_abs = max_abs


class ConfigError(TempoError):
    kind = "config"

    def __init__(self, detail: str, key: str | None = None) -> None:
        if key is not None:
            detail = f"{key}: {detail}"
        super().__init__(detail)
        self.key = key


class DataError(TempoError):
    """I/O or content problem in a data file; names the path and field."""

    kind = "data"

    def __init__(self, path: str, detail: str, field: str | None = None) -> None:
        where = f"{path} [{field}]" if field else path
        super().__init__(f"{where}: {detail}")
        self.path = path
        self.field = field
