"""Embedding-only editing of a CLIP-style text encoder.

Edit a word's token-embedding rows so a source prompt's final hidden states
match a destination prompt's, with exact revert, sequential editing, a
gender-bias balancing variant, a WTE probe, and hidden-state evaluation
metrics.
"""

from .autodiff import Tape, Tensor, backward, finite_difference_grad
from .balance import (
    BalanceMode,
    BalancerParams,
    BiasEditRequest,
    alpha_weight,
    balanced_loss,
    bias_rate_delta,
    edit_balance,
    init_profession_embedding,
)
from .editor import (
    BudgetReport,
    EditHyperparams,
    EditLedger,
    EditRequest,
    EditResult,
    LossPositions,
    OptimizerKind,
    edit_multi_encoder,
    edit_sequential,
    edit_single,
    merge_budget_reports,
    mse_hidden,
    param_budget_report,
    revert,
    target_token_ids,
)
from .encoder import (
    EncoderBundle,
    EncoderConfig,
    EncoderWeights,
    HiddenStates,
    TokenSequence,
    Vocab,
    encode,
    init_random_weights,
    tokenize,
)
from .archive import load_vocab, load_weights, save_vocab, save_weights
from .evaluation import (
    EditEntry,
    GenderEntry,
    MetricReport,
    aggregate_reports,
    classify,
    evaluate_edit,
    female_percentage,
    filter_sequential_dataset,
    gender_delta,
    load_edit_entries,
    load_gender_entries,
)
from .probe import (
    ProbeDataset,
    ProbeModel,
    accuracy_over_seeds,
    extract_features,
    split,
    train_logreg,
)

__version__ = "0.1.0"
