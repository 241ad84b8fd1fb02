class ZsaxError(Exception):
    pass


class LengthMismatch(ZsaxError, ValueError):
    pass


class ShapeMismatch(ZsaxError, ValueError):
    pass


class WidthMismatch(ZsaxError, ValueError):
    pass


class ConfigError(ZsaxError, ValueError):
    pass


class ConfigMismatch(ZsaxError, ValueError):
    pass


class IoFailure(ZsaxError, OSError):
    """An I/O error annotated with the file and byte offset involved."""

    def __init__(self, message, path=None, offset=None):
        detail = message
        if path is not None:
            detail += f" [{path}"
            detail += f" @ {offset}]" if offset is not None else "]"
        super().__init__(detail)
        self.path = path
        self.offset = offset


class CorruptHeader(IoFailure):
    pass


class CorruptRun(IoFailure):
    pass


class OutOfBounds(ZsaxError, IndexError):
    pass


class EmptyIndex(ZsaxError, LookupError):
    pass


class EmptyWindow(ZsaxError, LookupError):
    pass


class OutOfOrderInput(ZsaxError, ValueError):
    pass
