"""Exception hierarchy shared across the toolkit."""


class FlimError(Exception):
    """Base class for all toolkit errors."""


# --- volume I/O and geometry ---

class MissingFile(FlimError):
    pass


class MalformedHeader(FlimError):
    pass


class SizeMismatch(FlimError):
    pass


class NonPositiveTarget(FlimError):
    pass


class EmptyMask(FlimError):
    pass


class DimsMismatch(FlimError):
    pass


class ZeroTargetDim(FlimError):
    pass


class IndexOutOfRange(FlimError):
    pass


class NoComponentFound(FlimError):
    pass


# --- intensity standardization ---

class DegenerateRange(FlimError):
    pass


class TwoSummitsNotFound(FlimError):
    pass


# --- kernel learning ---

class InvalidCoord(FlimError):
    pass


class EmptyPatchSet(FlimError):
    pass


class ChannelMismatch(FlimError):
    pass


class TooFewPatches(FlimError):
    pass


class ZeroCentroid(FlimError):
    pass


class RankDeficient(FlimError):
    pass


class MalformedModelFile(FlimError):
    pass


# --- architecture sessions ---

class SpecNotEvaluated(FlimError):
    pass


class EmptyCandidates(FlimError):
    pass


# --- classification ---

class SingleClassData(FlimError):
    pass


class NonFiniteFeature(FlimError):
    pass


class DimMismatch(FlimError):
    pass


class EmptyMatrix(FlimError):
    pass


class TooFewAbnormal(FlimError):
    pass
