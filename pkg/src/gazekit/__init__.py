"""gazekit: head-pose-dependent branched CNN gaze estimation toolkit."""

__version__ = "0.1.0"
