"""Exception hierarchy shared by all pipeline stages."""


class SDVDiagError(Exception):
    """Base class for domain errors (CLI exit code 1)."""


class MalformedRecord(SDVDiagError):
    def __init__(self, message, line_number=None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class InvalidValue(MalformedRecord):
    """A record parsed structurally but carries an impossible value."""


class StorageFull(SDVDiagError):
    pass


class InvalidWindow(SDVDiagError, ValueError):
    pass


class EmptySeries(SDVDiagError, ValueError):
    pass


class UnknownDetector(SDVDiagError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class InsufficientHistory(SDVDiagError, ValueError):
    pass


class EmptyCorpus(SDVDiagError, ValueError):
    pass


class ZeroVariance(SDVDiagError, ValueError):
    pass


class TooShort(SDVDiagError, ValueError):
    pass


class InsufficientData(SDVDiagError, ValueError):
    pass


class NotYetBuilt(SDVDiagError):
    pass


class StartNotInGraph(SDVDiagError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class InvalidTopology(SDVDiagError, ValueError):
    pass


class UnknownTarget(SDVDiagError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class ConfigError(SDVDiagError, ValueError):
    pass
