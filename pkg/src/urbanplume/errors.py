"""Exception hierarchy shared across the toolkit.

Every error that should map to a distinct CLI exit code derives from one of
the category bases below (ConfigError, InputError, ConstraintError,
SolverError, InstabilityError).
"""


class UrbanPlumeError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(UrbanPlumeError):
    """Invalid or incomplete scenario configuration."""


class InputError(UrbanPlumeError):
    """Malformed or unusable input data (files, geometry)."""


class ConstraintError(UrbanPlumeError):
    """A modelling constraint was violated (blockage ratio, mesh budget...)."""


class SolverError(UrbanPlumeError):
    """Numerical solver failure."""


class InstabilityError(UrbanPlumeError):
    """Non-finite values appeared during time integration."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


# --- input / geometry ------------------------------------------------------

class GeoJsonParseError(InputError):
    """Input is not valid JSON; carries the byte offset of the failure."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class DomainTooLargeError(InputError):
    """Geographic extent too wide for the flat-earth projection."""


class EmptyBuildingSetError(InputError):
    """No usable building polygons."""


class UnsupportedWindDirectionError(InputError):
    """Wind direction cannot be mapped onto an axis-aligned domain."""


class BlockageRatioError(ConstraintError):
    """Domain violates the blockage-ratio admissibility bound."""


# --- meshing ---------------------------------------------------------------

class SegmentConflictError(ConstraintError):
    """Two input segments intersect; carries both offending segments."""

    def __init__(self, seg_a, seg_b):
        super().__init__(f"input segments intersect: {seg_a} and {seg_b}")
        self.segments = (seg_a, seg_b)


class TriangleBudgetError(ConstraintError):
    """Refinement exceeded the configured triangle budget."""


class MeshTopologyError(UrbanPlumeError):
    """Mesh connectivity is inconsistent (non-conforming, untaggable edge)."""


# --- fem / solvers ---------------------------------------------------------

class SpaceMismatchError(UrbanPlumeError):
    """A field or dofmap does not belong to the expected mesh/space."""


class NonFiniteCoefficientError(UrbanPlumeError):
    """A coefficient field contains NaN or Inf."""


class ConstraintConflictError(UrbanPlumeError):
    """Duplicate Dirichlet constraints on one dof disagree."""


class SingularMatrixError(SolverError):
    """Sparse factorization failed; pivot index is -1 when unknown."""

    def __init__(self, message, pivot=-1):
        super().__init__(message)
        self.pivot = pivot


class NonconvergenceError(SolverError):
    """Newton iteration failed to converge; carries the residual history."""

    def __init__(self, message, residual_history):
        super().__init__(message)
        self.residual_history = list(residual_history)


class PlumePlacementError(InputError):
    """Initial plume center lies outside the domain or inside a building."""


# --- reduced-order modelling -----------------------------------------------

class SnapshotError(SolverError):
    """Snapshot generation produced too few usable snapshots."""


class RankDeficiencyError(UrbanPlumeError):
    """Requested basis size exceeds the numerical rank of the data."""


class DeimSingularError(UrbanPlumeError):
    """DEIM sampled sub-matrix is singular."""


class RomArtifactError(InputError):
    """Reduced-model artifact file is missing, corrupt, or incompatible."""
