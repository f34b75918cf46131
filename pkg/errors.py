"""Exception hierarchy shared by every GraphCompNet module."""


class GraphCompNetError(Exception):
    """Base class for all domain errors raised by the pipeline."""


class ArgumentError(GraphCompNetError, ValueError):
    """An argument is outside its documented range."""


class ConfigError(GraphCompNetError, ValueError):
    """A configuration value or config file entry is invalid."""


class FormatError(GraphCompNetError, ValueError):
    """A mesh, cloud, model or config file could not be parsed."""


class InvalidPlacementError(GraphCompNetError, ValueError):
    """Rotation is not orthonormal with determinant +1."""


class EmptyIndexError(GraphCompNetError, ValueError):
    """A spatial index was requested over an empty cloud."""


class EmptyCloudError(GraphCompNetError, ValueError):
    """An operation received a point cloud with no points."""


class DegenerateMeshError(GraphCompNetError, ValueError):
    """A triangle mesh has zero total area."""


class DegenerateGeometryError(GraphCompNetError, ValueError):
    """A point cloud is too small or coplanar for rigid registration."""


class ResolutionLimitError(GraphCompNetError, ValueError):
    """A voxel size would produce more cells than the grid limit."""


class DisconnectedSurfaceError(GraphCompNetError, ValueError):
    """A surface voxel set splits into more than one 26-connected component."""


class ShapeError(GraphCompNetError, ValueError):
    """Tensor shapes do not conform for the requested operation."""


class NeighborIndexError(GraphCompNetError, IndexError):
    """A neighbor list refers to a row that does not exist."""


class ContractError(GraphCompNetError, RuntimeError):
    """A caller broke an API contract (non-scalar loss, unfrozen predictor, ...)."""


class IsolatedVertexError(GraphCompNetError, ValueError):
    """A graph vertex has no neighbors to aggregate over."""


class AlignmentError(GraphCompNetError, ValueError):
    """Two index-aligned inputs have different point counts."""


class NumericFaultError(GraphCompNetError, ArithmeticError):
    """A non-finite value appeared in gradients or losses."""

    def __init__(self, message: str, last_good: object = None):
        super().__init__(message)
        self.last_good = last_good


class OutOfChamberError(GraphCompNetError, ValueError):
    """A point lies outside the build chamber extents."""
