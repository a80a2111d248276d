"""Exception hierarchy for sonar-kd.

Every error carries a machine-readable ``code`` and a ``context`` dict so the CLI can emit the
``{code, message, context}`` envelope without string parsing.
"""

from typing import Any, Dict, Optional


class SonarKDError(Exception):
    """Base class for all sonar-kd errors."""

    code: str = "error"
    exit_code: int = 1

    def __init__(self, message: str, context: Optional[Dict[str, Any]] = None) -> None:
        super().__init__(message)
        self.message = message
        self.context: Dict[str, Any] = dict(context or {})

    def to_envelope(self) -> Dict[str, Any]:
        """Return the JSON error envelope."""
        return {"code": self.code, "message": self.message, "context": self.context}


class ShapeError(SonarKDError, ValueError):
    code = "shape_error"


class NonFiniteError(SonarKDError, ValueError):
    code = "non_finite"


class GraphError(SonarKDError):
    code = "graph_error"


class ConfigError(SonarKDError, ValueError):
    code = "config_error"
    exit_code = 2


class DatasetError(SonarKDError, ValueError):
    code = "dataset_error"


class MissingFileError(SonarKDError):
    code = "missing_file"
    exit_code = 3


class FormatError(SonarKDError):
    code = "format_error"


class LogitStoreError(SonarKDError):
    code = "logit_store_error"


class SpecMismatchError(SonarKDError):
    code = "spec_mismatch"
    exit_code = 4


class DivergenceError(SonarKDError):
    code = "divergence"
    exit_code = 5
