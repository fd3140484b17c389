from liverdx.harness.config import AblationFlags, RunConfig, load_run_config
from liverdx.harness.evaluate import run_eval
from liverdx.harness.train import run_train

__all__ = ["AblationFlags", "RunConfig", "load_run_config", "run_eval", "run_train"]
