# errors.py
"""Exception types raised by the DPPA toolkit."""

from typing import Optional


class DppaError(Exception):
    """Base class for every error the toolkit raises on purpose."""


class ParseError(DppaError):
    """Archive header or metadata could not be understood."""


class IoError(DppaError):
    """Archive file is unreadable, unwritable or truncated."""


class TopologyError(DppaError):
    """Tensor naming or (layer, unit) bookkeeping is inconsistent."""


class ShapeError(DppaError):
    """Two tensors that must line up element-wise do not."""


class ArgumentError(DppaError, ValueError):
    """A caller supplied an out-of-range or inconsistent argument."""


class InternalError(DppaError):
    """An invariant the toolkit relies on was violated."""


class OracleError(DppaError):
    """A scoring oracle failed during amplification search."""

    def __init__(self, message: str, step: Optional[int] = None):
        self.step = step
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)
