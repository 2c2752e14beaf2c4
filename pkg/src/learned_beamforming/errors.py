"""Exception hierarchy shared by the reconstruction modules.

The CLI maps these onto process exit codes: ``DataError`` -> 3, ``NumericalError`` -> 4.
"""

from __future__ import annotations

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class ReconstructionError(Exception):
    """Root of every domain error raised by learned_beamforming."""


class DataError(ReconstructionError, ValueError):
    """Malformed input: bad containers, shapes, configs, phantoms or regions."""


class NumericalError(ReconstructionError, ArithmeticError):
    """Non-finite values, zero denominators or degenerate profiles."""


class SingularCovarianceError(NumericalError):
    """Covariance estimate is not positive definite (insufficient diagonal loading)."""


class GraphError(ReconstructionError, RuntimeError):
    """Backward requested on a tensor that carries no recorded graph."""


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, NumericalError):
        return EXIT_NUMERIC
    if isinstance(exc, DataError):
        return EXIT_DATA
    return 1
