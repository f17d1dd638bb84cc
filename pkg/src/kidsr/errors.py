"""Exception hierarchy shared across the toolkit."""


class KidsrError(Exception):
    """Base class for every error raised by the toolkit."""


# corpus
class NotWav(KidsrError):
    pass


class UnsupportedFormat(KidsrError):
    pass


class TruncatedFile(KidsrError):
    pass


class ParseError(KidsrError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DuplicateId(ParseError):
    pass


class UnknownSplit(ParseError):
    pass


class InvalidProfile(KidsrError, ValueError):
    pass


class InsufficientData(KidsrError):
    def __init__(self, message, seconds_available=None):
        super().__init__(message)
        self.seconds_available = seconds_available


# features / gmm / svm
class TooShort(KidsrError):
    pass


class TooFewFrames(KidsrError):
    pass


class NonFiniteInput(KidsrError, ValueError):
    pass


class DimMismatch(KidsrError, ValueError):
    pass


class ModelMismatch(KidsrError, ValueError):
    pass


class DegenerateData(KidsrError):
    pass


class BadModelFile(KidsrError):
    pass


# eval
class TooFewSpeakers(KidsrError):
    pass


class EmptyScoreSet(KidsrError, ValueError):
    pass


class GroupTooSmall(KidsrError):
    def __init__(self, group, size, needed):
        super().__init__(f"group {group} has {size} speakers, need {needed}")
        self.group = group
        self.size = size
        self.needed = needed


class UsageError(KidsrError):
    pass
