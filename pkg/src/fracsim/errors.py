"""Exception hierarchy for the simulator."""


class FracsimError(Exception):
    """Base class for all simulator errors."""


class MeshInvariantError(FracsimError):
    """A mesh invariant (conformity, front topology, permutation) is violated."""


class ElementQualityError(FracsimError):
    """Element geometry is degenerate (non-positive Jacobian)."""

    def __init__(self, element_id, message=""):
        self.element_id = element_id
        super().__init__(f"element {element_id}: {message or 'degenerate geometry'}")


class QuadratureError(FracsimError):
    """A pair integral produced a non-finite value."""

    def __init__(self, elem_a, elem_b, message=""):
        self.elem_a = elem_a
        self.elem_b = elem_b
        super().__init__(f"pair ({elem_a}, {elem_b}): {message or 'non-finite integrand'}")


class CacheInvalidError(FracsimError):
    """Stiffness cache inconsistent with the mesh it is applied to."""


class SolverUnstableError(FracsimError):
    """Sustained linear-solver failure (more than the allowed failure count)."""


class NonConvergenceError(FracsimError):
    """Newton iteration failed to converge within the iteration cap."""


class TimeStepRejected(FracsimError):
    """Time step must be retried with a smaller increment."""


class HostSearchError(FracsimError):
    """Inverse-mapping host element search failed for an interior node."""

    def __init__(self, node_id, message=""):
        self.node_id = node_id
        super().__init__(f"node {node_id}: {message or 'no host element found'}")


class ConfigError(FracsimError):
    """Configuration file failed to parse or validate."""
