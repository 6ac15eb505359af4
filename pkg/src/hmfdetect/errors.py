"""Exception hierarchy.

Everything raised on purpose derives from :class:`HMFError`.  The CLI maps
:class:`ConfigError` to exit code 1 and every other :class:`HMFError` to 2.
"""


class HMFError(Exception):
    pass


class ConfigError(HMFError):
    """Invalid run configuration or parameters (validation failure)."""


class ParseError(HMFError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DegenerateTransformError(HMFError):
    pass


class UnsupportedRasterError(HMFError):
    pass


class OutOfSceneError(HMFError):
    pass


class PartialCoverageError(HMFError):
    def __init__(self, message, overhang):
        self.overhang = overhang
        super().__init__(message)


class IngestError(HMFError):
    pass


class UnsupportedCRSError(HMFError):
    pass


class GeocodeUnavailableError(HMFError):
    def __init__(self, address_id, reason=""):
        self.address_id = address_id
        msg = f"geocoding unavailable for address {address_id!r}"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)


class LowConfidenceError(HMFError):
    def __init__(self, address_id, confidence, floor):
        self.address_id = address_id
        self.confidence = confidence
        super().__init__(
            f"geocode confidence {confidence:.3f} for {address_id!r} is below floor {floor:.3f}"
        )


class EmptyClassError(HMFError):
    pass


class StratificationError(HMFError):
    pass


class ShapeError(HMFError):
    pass


class LabelError(HMFError):
    pass


class DivergenceError(HMFError):
    def __init__(self, epoch):
        self.epoch = epoch
        super().__init__(f"training diverged (non-finite loss) at epoch {epoch}")


class UndefinedCurveError(HMFError):
    pass


class EmptyInputError(HMFError):
    pass


class JoinError(HMFError):
    pass


class ExportError(HMFError):
    pass


class CheckpointError(HMFError):
    pass
