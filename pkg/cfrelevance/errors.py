#
# 17/10/2026
# cfrelevance: confidence-filtered relevance for naturalness classifiers
#
# Released under GNU GENERAL PUBLIC LICENSE v3. (Use at your own risk)
#


class CFRError(Exception):
    "root of every error raised by the package"


class DimensionError(CFRError):
    pass


class InputError(CFRError):
    pass


class ParameterError(CFRError):
    pass


class ClassIndexError(CFRError, IndexError):
    pass


class NotPositiveDefiniteError(CFRError):
    pass


class SingularError(CFRError):
    pass


class CacheInvalidError(CFRError):
    pass


class DivergenceError(CFRError):
    def __init__(self, step, loss):
        CFRError.__init__(self, "training diverged at step %d (loss=%s)" % (step, loss))
        self.step = step
        self.loss = loss


class InsufficientDataError(CFRError):
    pass


class FormatError(CFRError):
    pass


class CorruptionError(CFRError):
    pass


class DegenerateDistributionError(CFRError):
    pass


class UndefinedCorrelationError(CFRError):
    pass


class StageError(CFRError):
    """
    Wraps any failure inside a pipeline stage so the CLI can report
    which stage broke: "explain: <original message>"
    """
    def __init__(self, stage, cause):
        CFRError.__init__(self, "%s: %s" % (stage, cause))
        self.stage = stage
        self.cause = cause
