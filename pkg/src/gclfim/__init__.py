"""Fisher-information regularization for class-incremental graph learning."""

__version__ = "0.1.0"

from .engine import RunResult, TrainConfig, adam_step, ema_snapshot, make_batches, run_continual, train_task
from .fisher import (
    diag_fim_empirical,
    diag_fim_predicted,
    diag_fim_sampled,
    exact_fim,
    fim_rank,
    sampled_batch_fim,
)
from .gcn import ModelParams, forward, init_params, loss_and_grad, per_sample_loglik_grad, sample_label
from .graphs import RawGraph, TaskGraph, TaskSchedule, build_schedule, generate_sbm_stream, load_graph, normalize_adjacency
from .metrics import AccuracyMatrix, average_forgetting, average_performance, emit_heatmap, evaluate
from .regularizers import (
    Anchor,
    AnchorSet,
    GradCache,
    RegConfig,
    ewc_penalty,
    lwf_penalty,
    mas_importance,
    online_ewc_update,
    ours_cache_push,
    ours_penalty,
    ours_unbiasedness_check,
)
