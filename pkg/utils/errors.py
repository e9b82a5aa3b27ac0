from typing import Any, Dict, Optional


class ZtpsError(Exception):
    """Base class for all errors raised by the package"""


class DomainError(ZtpsError, ValueError):
    """Invalid parameter or argument value"""


class TreeStructureError(ZtpsError):
    """Tree is not a valid binary partition tree"""


class NewickParseError(ZtpsError):
    """Malformed Newick text"""

    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DataError(ZtpsError):
    """Ill-formed input data

    Args:
        message: What is wrong
        path: File the data came from, when known
        line: 1-based line number in the file
        column: Column name or index
    """

    def __init__(self, message: str, path: Optional[str] = None,
                 line: Optional[int] = None, column: Optional[Any] = None):
        context = []
        if path is not None:
            context.append(f"file {path}")
        if line is not None:
            context.append(f"line {line}")
        if column is not None:
            context.append(f"column {column}")
        if context:
            message = f"{message} [{', '.join(context)}]"
        super().__init__(message)
        self.path = path
        self.line = line
        self.column = column


class OptimizationError(ZtpsError):
    """Likelihood maximization failed"""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ModelFormatError(ZtpsError):
    """Serialized model cannot be read"""
