from .export import (
    DEFAULT_DELIMITER,
    DEFAULT_ELICITATION,
    ExportConfig,
    ExportError,
    ExportSummary,
    export,
    load_model,
)

__all__ = [
    "DEFAULT_DELIMITER",
    "DEFAULT_ELICITATION",
    "ExportConfig",
    "ExportError",
    "ExportSummary",
    "export",
    "load_model",
]
