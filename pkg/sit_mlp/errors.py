"""
Exception hierarchy shared by every sit_mlp module.

Library code raises these; only the CLI and the tool server translate them
into exit codes / JSON error payloads.
"""


class SitMlpError(Exception):
    """Base class for all sit_mlp errors"""


class ShapeError(SitMlpError, ValueError):
    """Incompatible tensor extents (matmul inner dims, broadcasting, splits)"""


class ConfigError(SitMlpError, ValueError):
    """Invalid model / training / layer configuration"""


class DataError(SitMlpError, ValueError):
    """Malformed samples, manifests, labels or score files"""


class FormatError(SitMlpError, ValueError):
    """Corrupt or unsupported binary file (bad magic, version, dtype)"""


class ContractError(SitMlpError, RuntimeError):
    """A precondition of an operation was violated by the caller"""


class StateError(SitMlpError, RuntimeError):
    """Operation called in the wrong object state (no capture, spent tape)"""


class TrainingError(SitMlpError, RuntimeError):
    """Training aborted (non-finite loss, diverged parameters)"""
