"""Exception hierarchy. Every externally visible failure mode gets its own type."""


class StainbenchError(Exception):
    """Base class for all toolkit errors."""


# --- image IO ---

class MissingFileError(StainbenchError):
    pass


class CorruptImageError(StainbenchError):
    pass


class UnsupportedImageError(StainbenchError):
    """Wrong codec, bit depth, or color mode."""


# --- manifests ---

class DuplicateTileIdError(StainbenchError):
    def __init__(self, tile_id: str):
        super().__init__(f"duplicate tile_id: {tile_id}")
        self.tile_id = tile_id


class ManifestFormatError(StainbenchError):
    def __init__(self, message: str, line_no: int | None = None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class UnknownTileIdError(StainbenchError):
    def __init__(self, tile_id: str):
        super().__init__(f"unknown tile_id: {tile_id}")
        self.tile_id = tile_id


# --- dataset pipeline ---

class EmptyHistogramError(StainbenchError):
    pass


class RoiBoundsError(StainbenchError):
    pass


class TileSizeError(StainbenchError):
    pass


class SplitInfeasibleError(StainbenchError):
    pass


# --- numerics ---

class ShapeMismatchError(StainbenchError):
    pass


class ScheduleError(StainbenchError):
    """Invalid schedule parameters or step index out of range."""


class NonFiniteError(StainbenchError):
    pass


class MatrixShapeError(StainbenchError):
    pass


class NotSymmetricError(StainbenchError):
    pass


class NotPsdError(StainbenchError):
    pass


class InsufficientSamplesError(StainbenchError):
    pass


class DesignError(StainbenchError):
    """Unidentifiable or singular model design."""


class NotConvergedError(StainbenchError):
    pass


class ConfigError(StainbenchError):
    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field
