"""hdet: a deterministic simulator for learning-rate fan-out training.

Simulates N data-parallel replicas that share one mean-reduced gradient,
diversify per-replica hyperparameters around a common base (fan-out),
periodically average parameters (converge), and optionally adapt the base
learning rate with a gradient-free controller driven by replica losses.
"""

__version__ = "0.1.0"

from .collectives import RankGroup  # noqa: F401
from .config import (  # noqa: F401
    PRESETS,
    ExperimentConfig,
    load_config,
    preset_config,
    resolve_checkpoint,
)
from .engine import (  # noqa: F401
    ControllerSettings,
    EnsembleConfig,
    OptimizerConfig,
    RunConfig,
    RunResult,
    WarmInitConfig,
    reference_ddp_run,
    run,
)
from .metrics import compare, run_experiment  # noqa: F401
from .objectives import (  # noqa: F401
    ObjectiveSpec,
    ParamGroupSet,
    build_objective,
    load_params,
    save_params,
)
from .schedule import (  # noqa: F401
    AutoLRConfig,
    ConfigError,
    OneCycleConfig,
    decay_gamma,
    one_cycle_lr,
    spread_multipliers,
    sync_stats,
    velocity_update,
)
