from typing import Any, List, Optional


class LayerSegError(Exception):
    pass


class ShapeError(LayerSegError, ValueError):
    pass


class NonFiniteError(LayerSegError, FloatingPointError):
    pass


class BackwardError(LayerSegError, RuntimeError):
    pass


class ConfigError(LayerSegError, ValueError):
    pass


class CompatibilityError(LayerSegError):
    pass


class TopologyError(LayerSegError, ValueError):
    def __init__(self, message: str, column: Optional[int] = None):
        super().__init__(message)
        self.column = column


class ContainerError(LayerSegError):
    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(LayerSegError, RuntimeError):
    def __init__(self, message: str, last_good: Any = None, curve: Optional[List[Any]] = None):
        super().__init__(message)
        self.last_good = last_good
        self.curve = curve or []
