"""Exception types shared across the package."""


class PerfmdpError(Exception):
    """Base class for package errors."""


class ConfigError(PerfmdpError):
    """Bad experiment configuration. Carries a list of messages."""

    def __init__(self, messages):
        if isinstance(messages, str):
            messages = [messages]
        self.messages = list(messages)
        super().__init__("; ".join(self.messages))


class InvalidKernelError(PerfmdpError):
    """mu Phi^T is not a stochastic kernel beyond renormalization tolerance."""


class SingularSystemError(PerfmdpError):
    """A linear system that should be regular for gamma < 1 failed to solve."""


class KappaZeroError(PerfmdpError):
    """kappa = lambda_min(Phi Phi^T) is zero, so 1/sqrt(kappa) quantities
    are undefined. Raised by certificates and bounds that divide by it."""


class ProjectionInfeasibleError(PerfmdpError):
    """Projected parameters cannot be represented in the feature span."""


class FitResidualError(PerfmdpError):
    """An induced reward or kernel does not lie in the feature span."""


class DatasetError(PerfmdpError):
    """Sampling was asked to draw from an invalid distribution."""


class RetrainRoundError(PerfmdpError):
    """A retraining round failed; carries the 1-based round index."""

    def __init__(self, round_index, message):
        self.round_index = int(round_index)
        super().__init__(str(message))


class SizeLimitError(PerfmdpError):
    """A brute-force or oracle routine was called above its size guard."""


class OracleNonConvergence(PerfmdpError):
    """The slow reference solver failed to reach its internal tolerance."""
