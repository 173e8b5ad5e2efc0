"""
Exception types raised by splatdrive.

Every error carries a short ``kind`` string; the command line prints it in the
structured ``error kind=... message=...`` line.
"""
from typing import Any, Dict, Optional


class SplatDriveError(Exception):
    """Base class for all splatdrive failures."""

    kind = "error"

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


class InvalidCameraError(SplatDriveError):
    kind = "invalid-camera"


class InvalidPoseError(SplatDriveError):
    kind = "invalid-pose"


class InvalidDepthError(SplatDriveError):
    kind = "invalid-depth"


class InvalidBoxError(SplatDriveError):
    kind = "invalid-box"


class InvalidTrajectoryError(SplatDriveError):
    kind = "invalid-trajectory"


class CorruptLatentError(SplatDriveError):
    kind = "corrupt-latent"

    def __init__(self, message: str, channel: str):
        super().__init__(f"{message} (channel: {channel})")
        self.channel = channel


class CorruptForwardError(SplatDriveError):
    kind = "corrupt-forward"


class IncompleteTrajectoryError(SplatDriveError):
    kind = "incomplete-trajectory"


class ShapeMismatchError(SplatDriveError):
    kind = "shape-mismatch"


class LengthMismatchError(SplatDriveError):
    kind = "length-mismatch"


class DimensionMismatchError(SplatDriveError):
    kind = "dimension-mismatch"


class DivergedTrainingError(SplatDriveError):
    kind = "diverged-training"

    def __init__(
        self,
        message: str,
        step: int,
        diagnostics: Optional[Dict[str, Any]] = None,
        last_good_checkpoint: Optional[str] = None,
    ):
        detail = f"{message} at step {step}"
        if diagnostics:
            detail += " " + " ".join(f"{k}={v}" for k, v in diagnostics.items())
        if last_good_checkpoint:
            detail += f" last_good_checkpoint={last_good_checkpoint}"
        super().__init__(detail)
        self.step = step
        self.diagnostics = diagnostics or {}
        self.last_good_checkpoint = last_good_checkpoint


class DivergedSamplingError(SplatDriveError):
    kind = "diverged-sampling"


class UndefinedOracleError(SplatDriveError):
    kind = "undefined-oracle"


class PairingError(SplatDriveError):
    kind = "pairing"


class UnknownCategoryError(SplatDriveError):
    kind = "unknown-category"


class TimestepOutOfRangeError(SplatDriveError):
    kind = "timestep-out-of-range"


class MissingCheckpointError(SplatDriveError):
    kind = "missing-checkpoint"

    def __init__(self, path: str):
        super().__init__(f"checkpoint not found: {path}")
        self.path = path


class FormatError(SplatDriveError):
    kind = "format"
