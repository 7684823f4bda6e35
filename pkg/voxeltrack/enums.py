from enum import Enum


class PenaltyKind(Enum):
    """Shapes of the score penalty window."""

    Hann = 'hann'
    Gaussian = 'directional-gaussian'


class LatencyKind(Enum):
    """Where the per-frame processing time comes from."""

    Measured = 'measured'
    Injected = 'injected'


class EvalMode(Enum):
    """Evaluation protocols."""

    Offline = 'offline'
    Predictive = 'realtime-pred'
    NonPredictive = 'realtime-nonpred'

    @property
    def is_realtime(self) -> bool:
        """Determine if the mode runs the streaming simulation."""
        return self is not EvalMode.Offline
