"""Exception types raised across the package."""


class KepSvgpError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(KepSvgpError, ValueError):
    pass


class NotPositiveDefinite(KepSvgpError, ValueError):
    pass


class ConvergenceFailure(KepSvgpError, RuntimeError):
    pass


class NonFiniteObjective(KepSvgpError, FloatingPointError):
    pass


class ZeroMatrix(KepSvgpError, ValueError):
    pass


class SingularSystem(KepSvgpError, ValueError):
    pass


class EigenMismatch(KepSvgpError, ValueError):
    pass


class FixedLengthViolation(KepSvgpError, ValueError):
    pass


class VocabularyOverflow(KepSvgpError, ValueError):
    pass


class LabelOutOfRange(KepSvgpError, ValueError):
    pass


class NonFiniteLoss(KepSvgpError, FloatingPointError):
    """Training produced a NaN/Inf loss; carries the step and parameter norms."""

    def __init__(self, step, norms):
        self.step = step
        self.norms = dict(norms)
        worst = sorted(self.norms.items(), key=lambda kv: -kv[1] if kv[1] == kv[1] else float("-inf"))[:5]
        super().__init__(f"non-finite loss at step {step}; largest parameter norms: {worst}")


class EmptyDump(KepSvgpError, ValueError):
    pass


class NonBinaryLabels(KepSvgpError, ValueError):
    pass


class DegenerateLabels(KepSvgpError, ValueError):
    pass


class EmptySet(KepSvgpError, ValueError):
    pass


class InvalidConfig(KepSvgpError, ValueError):
    pass


class ParseError(KepSvgpError, ValueError):
    def __init__(self, line, message):
        self.line = line
        super().__init__(f"line {line}: {message}")


class RaggedRows(ParseError):
    pass


class CheckpointMismatch(KepSvgpError, ValueError):
    pass
