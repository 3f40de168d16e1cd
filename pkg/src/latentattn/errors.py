"""Exception types shared across the package."""


class LatentAttnError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(LatentAttnError):
    """Operand shapes are incompatible for the requested operation."""


class GroupMismatch(LatentAttnError):
    """Channel/head counts do not divide into the requested groups."""


class NotScalarRoot(LatentAttnError):
    """Gradient requested from a non-scalar root node."""


class MissingWeight(LatentAttnError):
    """A weight required by the variant is absent from the weight set."""


class UnexpectedWeight(LatentAttnError):
    """A weight set carries an entry the variant does not define."""


class OddRotaryDim(LatentAttnError):
    """Rotary dimension must be even (channels rotate in pairs)."""


class OddKvHeads(LatentAttnError):
    """Value-shift splits kv heads in half, so the count must be even."""


class StateCorrupt(LatentAttnError):
    """A decode state violated one of its structural invariants."""


class UnknownVariant(LatentAttnError):
    """Attention variant tag is not one of the supported five."""


class UnknownPreset(LatentAttnError):
    """Hardware preset name is not registered."""


class ConfigError(LatentAttnError):
    """Run configuration is invalid (maps to CLI exit code 2)."""
