"""Error taxonomy.

Every error carries a stable numeric code so it can be reported in-band
over the wire protocol (see netproto). Codes are part of the external
interface: never renumber, only append.
"""


class RosfsError(Exception):
    """Base class for all rosfs errors."""

    code = 1


class IoError(RosfsError):
    code = 2


class AlreadyExists(RosfsError):
    code = 3


class UnknownTopic(RosfsError):
    code = 4


class OutOfOrderTimestamp(RosfsError):
    code = 5


class OutOfBounds(RosfsError):
    code = 6


class CorruptRecord(RosfsError):
    code = 7


class CorruptMetadata(RosfsError):
    code = 8


class CorruptIndex(RosfsError):
    code = 9

    def __init__(self, message, page_id=None):
        super().__init__(message)
        self.page_id = page_id


class EmptyIndex(RosfsError):
    code = 10


class InvalidRange(RosfsError):
    code = 11


class BadCommand(RosfsError):
    code = 12


class BadArity(RosfsError):
    code = 13


class BadParam(RosfsError):
    code = 14


class NoBandwidthEstimate(RosfsError):
    code = 15


class NotABag(RosfsError):
    code = 16


class UnsupportedCompression(RosfsError):
    code = 17


class CorruptBag(RosfsError):
    code = 18

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


class Timeout(RosfsError):
    code = 19


class BadFrame(RosfsError):
    code = 20


_BY_CODE = {}
for _cls in list(globals().values()):
    if isinstance(_cls, type) and issubclass(_cls, RosfsError):
        _BY_CODE[_cls.code] = _cls


def error_class_for_code(code: int):
    """Map a wire error code back to its exception class."""
    return _BY_CODE.get(code, RosfsError)
