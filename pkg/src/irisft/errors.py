"""Exception types raised across the toolkit."""


class IrisFtError(Exception):
    """Base class for all toolkit errors."""


class EmptyMask(IrisFtError):
    """A mask with no foreground pixels where foreground is required."""


class ShapeMismatch(IrisFtError):
    """Two rasters that must share a shape do not."""


class EmptyBatch(IrisFtError):
    """A loss was asked to reduce over zero pixels."""


class InsufficientPixels(IrisFtError):
    """Not enough foreground/background pixels to sample triplets."""


class UnreadableImage(IrisFtError):
    """An image or mask file exists but cannot be decoded."""


class NoPairsFound(IrisFtError):
    """Dataset discovery matched no image/mask pairs."""


class DuplicateRecord(IrisFtError):
    """The same image path was discovered more than once."""


class EmptyTrainSplit(IrisFtError):
    """Training requested on a manifest whose train split is empty."""


class DivergedLoss(IrisFtError):
    """Training loss became NaN or infinite."""


class IoFailure(IrisFtError):
    """An output file could not be written."""


class MalformedCsv(IrisFtError):
    """A CSV input does not have the expected columns."""


class MalformedManifest(IrisFtError):
    """A manifest file is syntactically or semantically invalid."""


class CheckpointError(IrisFtError):
    """A checkpoint file is missing, corrupt, or incompatible."""
