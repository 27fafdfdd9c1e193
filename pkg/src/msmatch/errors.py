"""Exception types. Each carries a short machine-readable ``code``."""


class MatchingError(Exception):
    code = "error"

    def __init__(self, message=None, **context):
        self.context = context
        text = self.code if message is None else f"{self.code}: {message}"
        super().__init__(text)


class DegenerateHomography(MatchingError):
    code = "degenerate-homography"


class PointAtInfinity(MatchingError):
    code = "point-at-infinity"


class DegenerateCorrespondences(MatchingError):
    code = "degenerate-correspondences"


class ShapeMismatch(MatchingError, ValueError):
    code = "shape-mismatch"


class BadInputDims(MatchingError, ValueError):
    code = "bad-input-dims"


class KeypointOutOfBounds(MatchingError, ValueError):
    code = "keypoint-out-of-bounds"


class NanLoss(MatchingError, FloatingPointError):
    code = "nan-loss"


class InsufficientMatches(MatchingError):
    code = "insufficient-matches"


class NoConsensus(MatchingError):
    code = "no-consensus"


class UnpairedImage(MatchingError):
    code = "unpaired-image"


class ImageTooSmall(MatchingError, ValueError):
    code = "image-too-small"


class BadLabelFile(MatchingError):
    code = "bad-label-file"


class ManifestMismatch(MatchingError):
    code = "manifest-mismatch"


class ConfigError(MatchingError, ValueError):
    code = "config-error"
