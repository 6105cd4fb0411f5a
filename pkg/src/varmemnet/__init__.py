"""Memory-network question answering with Student-t variational embeddings.

The package trains end-to-end memory networks on line-numbered QA task
files, either as deterministic point estimates (the baseline) or with the
three embedding tables treated as heavy-tailed latent variables fitted by
minimizing a deformed-logarithm divergence against zero-mean Student-t
priors. Prediction averages over Monte Carlo weight draws.
"""

from .corpus import (
    EncodedStory,
    Encoder,
    Story,
    Vocabulary,
    build_vocab,
    load_task,
    parse_babi_file,
    position_weights,
    render_babi,
    split_train_val,
)
from .game import GameConfig, GameMetrics, generate_dataset, play_episode
from .model import (
    BASELINE,
    VARIATIONAL,
    AttentionTrace,
    MemN2N,
    OutputLayer,
    PointEmbedding,
    VariationalEmbedding,
    forward,
    load_checkpoint,
    predict,
    sample_weights,
    save_checkpoint,
)
from .tmath import (
    DivergenceBreakdown,
    TDistParams,
    digamma,
    escort_params,
    log_gamma,
    log_t,
    reparam_sample,
    sample_gamma,
    sample_student_t,
    student_t_log_pdf,
    t_divergence_closed,
    t_divergence_numeric_1d,
    t_hyper,
)
from .train import TrainConfig, evaluate_accuracy, init_network, train_joint, train_task

__version__ = "0.1.0"
