"""Exception types shared across the toolchain."""


class StaError(Exception):
    """Base class for all simulator/toolchain errors."""


class PatternViolation(StaError):
    """A group holds more nonzeros than the N:M pattern allows."""

    def __init__(self, group_index, count=None, n=None):
        self.group_index = group_index
        self.count = count
        self.n = n
        detail = f"group {group_index}"
        if count is not None:
            detail += f" has {count} nonzeros (limit {n})"
        super().__init__(detail)


class CorruptStream(StaError):
    pass


class BadMagic(CorruptStream):
    pass


class UnsupportedVersion(CorruptStream):
    pass


class DimMismatch(StaError, ValueError):
    pass


class GeometryMismatch(StaError, ValueError):
    pass


class InvalidConfig(StaError, ValueError):
    pass
