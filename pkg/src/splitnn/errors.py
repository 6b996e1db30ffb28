"""Exception hierarchy shared by every module."""


class SplitNNError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(SplitNNError):
    def __init__(self, layer, expected, got):
        self.layer = layer
        self.expected = expected
        self.got = got
        super().__init__(f"layer {layer!r}: expected input shape {expected}, got {got}")


class ProtocolMisuse(SplitNNError):
    """A stateful call was made out of order (e.g. backward before forward)."""


class InputError(SplitNNError):
    pass


class NonFiniteError(SplitNNError):
    pass


class PlanError(SplitNNError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid partition plan:\n  " + "\n  ".join(self.violations))


class DecodeError(SplitNNError):
    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class BadMagic(DecodeError):
    pass


class UnsupportedVersion(DecodeError):
    pass


class LengthMismatch(DecodeError):
    pass


class UnknownFrameType(DecodeError):
    pass


class ChannelClosed(SplitNNError):
    pass


class StepError(SplitNNError):
    """A split step failed; names the role and frame involved."""

    def __init__(self, role, frame, cause):
        self.role = role
        self.frame = frame
        self.cause = cause
        super().__init__(f"step aborted at role {role!r} ({frame}): {cause}")


class DatasetError(SplitNNError):
    pass


class ConfigError(SplitNNError):
    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("invalid config:\n  " + "\n  ".join(self.violations))


class IncompatibleRuns(SplitNNError):
    pass
