"""Exception hierarchy shared across the package."""


class ConceptMoEError(Exception):
    pass


class ShapeError(ConceptMoEError, ValueError):
    pass


class EmptyAxisError(ShapeError):
    pass


class LabelError(ConceptMoEError, ValueError):
    pass


class NonScalarLossError(ConceptMoEError, ValueError):
    pass


class MissingGradError(ConceptMoEError, RuntimeError):
    pass


class KernelSizeError(ConceptMoEError, ValueError):
    pass


class DomainError(ConceptMoEError, ValueError):
    """An input lies outside the range an operation is defined on."""


class SpecError(ConceptMoEError, ValueError):
    """A synthetic dataset spec that cannot be realised."""


class FormatError(ConceptMoEError):
    """Bad magic bytes, unsupported version or truncated payload in a binary file."""


class ConfigError(ConceptMoEError, ValueError):
    pass


class DivergenceError(ConceptMoEError, ArithmeticError):
    def __init__(self, stage: str, epoch: int):
        super().__init__(f"{stage}: non-finite loss at epoch {epoch}")
        self.stage = stage
        self.epoch = epoch
