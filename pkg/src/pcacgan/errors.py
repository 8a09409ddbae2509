"""Exception hierarchy shared by every pipeline stage."""


class PcacError(Exception):
    """Base class for all errors raised by pcacgan."""


class MalformedPly(PcacError):
    pass


class UnknownShapeKind(PcacError, ValueError):
    pass


class EmptyCloud(PcacError, ValueError):
    pass


class StrideMismatch(PcacError, ValueError):
    pass


class ShapeMismatch(PcacError, ValueError):
    pass


class DetachedLoss(PcacError):
    pass


class VersionMismatch(PcacError):
    pass


class EmptyDataset(PcacError, ValueError):
    pass


class EmptyBatch(PcacError, ValueError):
    pass


class UnsetClasses(PcacError):
    pass


class MissingVoxel(PcacError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class MissingGeometry(PcacError):
    pass


class Overflow(PcacError, OverflowError):
    pass


class CorruptStream(PcacError):
    pass


class DigestMismatch(PcacError):
    pass


class AlignmentError(PcacError, ValueError):
    pass


class GeometryMismatch(PcacError, ValueError):
    pass


class InsufficientPoints(PcacError, ValueError):
    pass


class NoOverlap(PcacError, ValueError):
    pass
