from .config import RunConfig, TTAConfig, load_config, save_config
from .metrics import macro_f1
from .pipeline import Pipeline, StageError, execute, run
from .postprocess import (
    PredictionSet,
    plain_predict,
    ensemble_max_logit,
    pseudo_label_select,
    read_predictions,
    tta_predict,
    write_predictions,
)
from .reports import emit_reports

__all__ = [
    "Pipeline",
    "PredictionSet",
    "RunConfig",
    "StageError",
    "TTAConfig",
    "emit_reports",
    "ensemble_max_logit",
    "execute",
    "load_config",
    "macro_f1",
    "plain_predict",
    "pseudo_label_select",
    "read_predictions",
    "run",
    "save_config",
    "tta_predict",
    "write_predictions",
]
