"""Exception types shared across the package."""


class NumericError(RuntimeError):
    """A non-finite value surfaced mid-computation.

    ``term`` names the quantity that went bad (e.g. ``"loss_ce"``,
    ``"grad"``) so callers can report exactly which piece of a step
    failed instead of a bare NaN traceback.
    """

    def __init__(self, term: str, detail: str = ""):
        self.term = term
        msg = f"non-finite value in {term}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class ConfigError(ValueError):
    """Invalid run configuration; collects every violation at once."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__(
            "invalid configuration:\n"
            + "\n".join(f"  - {v}" for v in self.violations)
        )


class CsvFormatError(ValueError):
    """Malformed CSV input; carries 1-based row and column context."""

    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        self.row = row
        self.column = column
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(message + suffix)
