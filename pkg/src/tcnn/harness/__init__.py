from .config import ConfigError, RunConfig, build_config, load_config
from .run import eval_checkpoints, eval_ensemble, finetune, train

__all__ = ["ConfigError", "RunConfig", "build_config", "eval_checkpoints", "eval_ensemble", "finetune", "load_config", "train"]
