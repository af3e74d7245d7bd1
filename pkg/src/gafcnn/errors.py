"""Exception hierarchy.

Every error carries a short ``category`` string; the CLI prints it and maps it
to a distinct exit code so callers can branch without parsing messages.
"""


class GafCnnError(Exception):
    category = "error"
    exit_code = 1


class ParseError(GafCnnError):
    category = "parse"
    exit_code = 2

    def __init__(self, line, reason):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class InvariantError(GafCnnError):
    category = "invariant"
    exit_code = 3

    def __init__(self, line, reason="price bounds violated"):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class DuplicateBarError(InvariantError):
    category = "duplicate-bar"

    def __init__(self, line, timestamp):
        super().__init__(line, f"duplicate timestamp {timestamp}")
        self.timestamp = timestamp


class InsufficientData(GafCnnError):
    category = "insufficient-data"
    exit_code = 4


class LengthError(GafCnnError):
    category = "length"
    exit_code = 4


class QuotaUnmet(GafCnnError):
    category = "quota-unmet"
    exit_code = 5

    def __init__(self, cls, found, needed):
        super().__init__(f"class {int(cls)}: found {found} windows, needed {needed}")
        self.cls = cls
        self.found = found
        self.needed = needed


class DomainError(GafCnnError):
    category = "domain"
    exit_code = 6


class ShapeError(GafCnnError):
    category = "shape"
    exit_code = 6


class EmptySplit(GafCnnError):
    category = "empty-split"
    exit_code = 7


class ConfigError(GafCnnError):
    category = "config"
    exit_code = 8


class FormatError(GafCnnError):
    category = "format"
    exit_code = 9
