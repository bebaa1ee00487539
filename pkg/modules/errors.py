"""
Exception hierarchy for the proxy-label pipeline
"""

from __future__ import annotations


class ProxyPipelineError(Exception):
    """Base class for every error raised by the pipeline"""


class ParseError(ProxyPipelineError, ValueError):
    """Malformed input file row"""

    def __init__(self, message: str, line_number: int | None = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class SchemaError(ProxyPipelineError, ValueError):
    """Data does not agree with the declared feature schema"""


class ShapeError(ProxyPipelineError, ValueError):
    """Array dimensions do not line up"""


class NonFiniteGradientError(ProxyPipelineError, FloatingPointError):
    """A gradient handed to the optimizer contains NaN or inf"""

    def __init__(self, parameter: str):
        self.parameter = parameter
        super().__init__(f"non-finite gradient for parameter '{parameter}'")


class DivergenceError(ProxyPipelineError, FloatingPointError):
    """Training loss became NaN or inf"""

    def __init__(self, what: str, epoch: int):
        self.epoch = epoch
        super().__init__(f"{what} diverged at epoch {epoch}")


class DegenerateClusterError(ProxyPipelineError, ValueError):
    """Clustering collapsed to fewer than two groups"""


class GroupError(ProxyPipelineError, ValueError):
    """A group (or group x class cell) needed by a metric or trainer is empty"""


class ConfigError(ProxyPipelineError, ValueError):
    """Invalid run configuration"""


class ArtifactError(ProxyPipelineError):
    """Problem with a persisted pipeline artifact"""


class MissingArtifactError(ArtifactError):
    """An upstream artifact is absent"""

    def __init__(self, required_stage: str, path: str):
        self.required_stage = required_stage
        super().__init__(
            f"missing artifact {path}; run the '{required_stage}' stage first"
        )


class StaleArtifactError(ArtifactError):
    """An upstream artifact was produced under a different configuration"""

    def __init__(self, stage: str, expected: str, found: str):
        self.stage = stage
        super().__init__(
            f"stale '{stage}' artifact: config hash {found[:12]} does not match "
            f"current configuration {expected[:12]}; rerun '{stage}'"
        )
