"""Exception types raised across the toolkit."""


class InvalidArgumentError(ValueError):
    pass


class BehindCameraError(ValueError):
    def __init__(self, vertex: int, depth: float, near: float):
        self.vertex = vertex
        self.depth = depth
        super().__init__(
            f"vertex {vertex} has camera depth {depth:.6g} <= near plane {near:.6g}"
        )


class EmptyOverlapError(RuntimeError):
    """No pixel where the render and the original image overlap (diverged pose)."""

    def __init__(self, view: int):
        self.view = view
        super().__init__(f"render and image do not overlap in view {view}")


class DegenerateConfigurationError(ValueError):
    pass


class EmptyCropError(ValueError):
    pass


class InvalidMeshError(ValueError):
    pass


class BadInitializationError(RuntimeError):
    pass


class FitAbortedError(RuntimeError):
    def __init__(self, term: str, iteration: int):
        self.term = term
        self.iteration = iteration
        super().__init__(f"non-finite gradient from {term} at iteration {iteration}")
