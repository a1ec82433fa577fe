"""Exception hierarchy shared by every stage of the pipeline."""


class PrawnlenError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(PrawnlenError, ValueError):
    """Malformed annotation document.

    ``offset`` is the byte offset of the failure within the document, or
    ``None`` when the document parsed but its structure is invalid.
    """

    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (at byte {offset})")
        self.offset = offset


class FormatError(PrawnlenError, ValueError):
    """Binary raster whose header or size does not match expectations."""


class ConfigError(PrawnlenError, ValueError):
    """Invalid configuration record; ``field`` names the offending key."""

    def __init__(self, field, message=None):
        super().__init__(field if message is None else f"{field}: {message}")
        self.field = field


class EmptyMask(PrawnlenError, ValueError):
    """A mask with no set pixels where an instance was required."""


class InvalidDepth(PrawnlenError, ValueError):
    """Non-positive depth passed to a de-projection."""


class TooSparse(PrawnlenError, ValueError):
    """Too few valid points to interpolate, fit, or measure."""


class OrderError(PrawnlenError, ValueError):
    """Frames presented to the tracker out of capture order."""


class KindError(PrawnlenError, TypeError):
    """Regions of different kinds (box vs mask) compared with each other."""


class DegenerateX(PrawnlenError, ValueError):
    """Regression requested on a single distinct x value."""


class EmptyReport(PrawnlenError, ValueError):
    """No accepted measurements to report on."""


class SpecError(PrawnlenError, ValueError):
    """Invalid synthetic scene or motion specification."""
