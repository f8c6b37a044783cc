"""Exception hierarchy shared by every pipeline stage.

Each class carries the CLI exit code it maps to.
"""


class ProcsightError(Exception):
    exit_code = 1


class ValidationError(ProcsightError, ValueError):
    """Bad configuration, detected before any stage runs."""

    exit_code = 2


class DataError(ProcsightError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, message, offset=None, line_no=None, source=None):
        self.offset = offset
        self.line_no = line_no
        self.source = source
        self.reason = message
        where = []
        if source is not None:
            where.append(str(source))
        if line_no is not None:
            where.append(f"line {line_no}")
        if offset is not None:
            where.append(f"byte {offset}")
        prefix = f"{':'.join(where)}: " if where else ""
        super().__init__(prefix + message)


class SchemaError(DataError):
    def __init__(self, message, field=None):
        self.field = field
        super().__init__(message)


class OrderingError(DataError):
    pass


class PartitionError(DataError):
    pass


class TrainingError(DataError):
    pass


class CorruptionError(DataError):
    pass


class VersionError(DataError):
    def __init__(self, found, expected):
        self.found = found
        self.expected = expected
        super().__init__(f"unsupported format_version {found!r} (this build reads {expected!r})")


class NumericError(ProcsightError):
    exit_code = 4

    def __init__(self, message, step=None, epoch=None):
        self.step = step
        self.epoch = epoch
        super().__init__(message)


class ShapeError(DataError, ValueError):
    pass
