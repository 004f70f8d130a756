"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    pass


class MeshError(ValueError):
    pass


class MeshFormatError(MeshError):
    pass


class MeshIndexError(MeshError, IndexError):
    pass


class NonManifoldError(MeshError):
    pass


class DisconnectedGraphError(MeshError):
    def __init__(self, components):
        self.components = components
        sizes = ", ".join(str(len(c)) for c in components)
        super().__init__(f"graph has {len(components)} connected components (sizes: {sizes})")


class GradCheckAborted(RuntimeError):
    pass


class MissingGradientError(RuntimeError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"parameter {name!r} has no gradient")


class TrainingDiverged(RuntimeError):
    def __init__(self, step, loss):
        self.step = step
        self.loss = loss
        super().__init__(f"non-finite loss {loss!r} at step {step}")
