"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: input problems -> 2, numerical or
degenerate configurations -> 3, training divergence -> 4.
"""


class PedsenseError(Exception):
    """Base class for all toolkit errors."""


class InputError(PedsenseError, ValueError):
    """Malformed or inconsistent input data."""


class NumericalError(PedsenseError, ArithmeticError):
    """Degenerate geometry, non-finite values, or impossible shapes."""


class DivergenceError(NumericalError):
    """Training produced a non-finite loss."""


# audio ingestion
class WavError(InputError):
    pass


class WavHeaderError(WavError):
    """The RIFF/WAVE header could not be parsed."""


class UnsupportedCodecError(WavError):
    """The file is not linear PCM / IEEE float at a supported bit depth."""


class EmptyAudioError(WavError):
    """The data chunk holds no samples."""


# labels
class LabelError(InputError):
    pass


class LabelFormatError(LabelError):
    def __init__(self, row: int, message: str):
        super().__init__(f"row {row}: {message}")
        self.row = row


class DuplicateLabelError(LabelError):
    pass


class RadiusDomainError(LabelError):
    pass


class MonotonicityError(LabelError):
    pass


class DegenerateCalibrationError(NumericalError):
    pass


class ShapeError(NumericalError, ValueError):
    pass


class NonFiniteError(NumericalError):
    pass
