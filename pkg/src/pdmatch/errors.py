"""Exception taxonomy shared across the package.

Every failure mode that callers are expected to branch on gets its own
class; anything else is a plain ValueError/OSError from the stdlib.
"""


class PdmatchError(Exception):
    """Base class for all package-specific failures."""


class ShapeMismatch(PdmatchError):
    """Array arguments disagree in length or dimensionality."""


class DegenerateProjection(PdmatchError):
    """Projective depth (or canonical scale) vanished; point/matrix unusable."""


class RankDeficient(PdmatchError):
    """A least-squares design matrix has too little rank to determine a fit."""


class NoConsensus(PdmatchError):
    """Robust estimation found no sample with a viable inlier set."""


class InvalidSchedule(PdmatchError):
    """Noise-schedule parameters violate their admissible ranges."""


class ZeroVariance(PdmatchError):
    """An image (or patch) is constant where contrast is required."""


class ImageTooSmall(PdmatchError):
    """Image cannot host the requested number of spaced keypoints."""


class OverlapUnsatisfiable(PdmatchError):
    """Pair synthesis kept rejecting transforms below the overlap floor."""


class NoTransform(PdmatchError):
    """Evaluation asked for transform-based errors on a pair with none."""


class StaleCache(PdmatchError):
    """Backward pass invoked with a cache that does not match its inputs."""


class BadCheckpoint(PdmatchError):
    """Checkpoint bytes do not parse (magic, header, or tensor payload)."""
