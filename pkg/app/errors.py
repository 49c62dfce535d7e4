class EfsaError(Exception):
    """Base error. `exit_code` is what the CLI exits with when this escapes."""

    exit_code = 4


class ConfigError(EfsaError, ValueError):
    exit_code = 2


class MissingArtifactError(EfsaError, FileNotFoundError):
    exit_code = 3

    def __init__(self, artifact: str, path: object):
        super().__init__(f"Missing artifact '{artifact}': {path}")
        self.artifact = artifact
        self.path = path


class ShapeError(EfsaError, ValueError):
    pass


class DegenerateVectorError(EfsaError, ValueError):
    pass


class ContractError(EfsaError, ValueError):
    pass


class IngestError(EfsaError, ValueError):
    pass


class PoolLookupError(EfsaError, KeyError):
    pass


class AdaptationError(EfsaError, RuntimeError):
    pass


class TrainingError(EfsaError, RuntimeError):
    pass
