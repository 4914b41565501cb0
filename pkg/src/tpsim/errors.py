"""Exception types raised across the simulator."""


class TpsimError(Exception):
    """Base class for every error raised by tpsim."""


class ConstraintViolation(TpsimError):
    """World size or mesh shape does not satisfy a parallel mode's requirement."""


class UnknownAxis(TpsimError):
    pass


class UnknownRank(TpsimError):
    pass


class SelfSend(UnknownRank):
    pass


class RootNotInGroup(TpsimError):
    pass


class ShapeMismatch(TpsimError):
    pass


class IndivisibleLength(TpsimError):
    pass


class IndivisibleDim(TpsimError):
    pass


class IndivisibleSequence(TpsimError):
    pass


class Deadlock(TpsimError):
    """Every unfinished rank is blocked and none of them can make progress."""


class RankAborted(TpsimError):
    """Raised inside surviving ranks after another rank failed."""


class StageInvalid(TpsimError):
    pass


class EmptyModel(TpsimError):
    pass


class ConfigError(TpsimError):
    """Bad experiment configuration. ``key`` names the offending entry."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key
