"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor or image shapes are incompatible with the requested operation."""


class ParameterError(ValueError):
    """A scalar argument is outside its valid range."""


class ContractError(RuntimeError):
    """A caller violated a documented precondition (wrong space tag, odd size, ...)."""


class ValidationError(ValueError):
    """Input data failed content validation (values out of range, ...)."""


class FormatError(ValueError):
    """A serialized file is malformed (bad magic, truncation, wrong version)."""


class SchemaError(ValueError):
    """A well-formed file is missing required entries."""


class GenerationError(RuntimeError):
    """The sample generator could not produce a usable sample."""


class PlanError(ValueError):
    """A tile plan is inconsistent with the image or overlap constraints."""


class NonFiniteError(RuntimeError):
    """A non-finite value appeared where the pipeline requires finite data."""
