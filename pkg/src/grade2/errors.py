"""Exception types shared across the package."""

from __future__ import annotations


class Grade2Error(Exception):
    """Base class for all package-specific errors."""


class ConfigError(Grade2Error):
    """An invalid run configuration.

    Carries the offending field name so the CLI error formatter can point
    at it directly.
    """

    def __init__(self, field: str, message: str):
        super().__init__(message)
        self.field = field
        self.message = message


class UnknownFamilyError(ConfigError):
    """An unrecognized forcing or noise family name."""

    def __init__(self, field: str, name: str, known):
        self.name = name
        self.known = sorted(known)
        super().__init__(
            field,
            f"unknown family {name!r} for {field!r}; known families: "
            + ", ".join(self.known),
        )


class DimensionMismatchError(Grade2Error):
    """A coefficient vector whose length does not match the basis."""

    def __init__(self, expected: int, got: int, what: str = "coefficient vector"):
        super().__init__(f"{what} has length {got}, basis has {expected} modes")
        self.expected = expected
        self.got = got


class BlowUpError(Grade2Error):
    """A trajectory exceeded the configured V-norm ceiling."""

    def __init__(self, t: float, v_norm: float, ceiling: float):
        super().__init__(
            f"trajectory blew up at t={t:.6g}: ||u||_V={v_norm:.6g} "
            f"exceeds ceiling {ceiling:.6g}"
        )
        self.t = t
        self.v_norm = v_norm
        self.ceiling = ceiling


class FormatError(Grade2Error):
    """A malformed snapshot, manifest, or data file."""


class SnapshotVersionError(FormatError):
    """A snapshot written by an incompatible format version."""

    def __init__(self, found, supported):
        super().__init__(
            f"snapshot format version {found!r} is not supported "
            f"(this build reads version {supported!r}); "
            f"re-export the snapshot with a matching build or upgrade this package"
        )
        self.found = found
        self.supported = supported
