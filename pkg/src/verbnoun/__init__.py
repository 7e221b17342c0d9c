"""Two-branch verb/noun action recognition with privileged detection features."""

from .data import (
    BankFileHeader,
    Episode,
    GeneratorSpec,
    generate_dataset,
    generate_episode,
    read_bank_file,
    write_bank_file,
)
from .evaluate import (
    ActionPrior,
    Prediction,
    estimate_action_prior,
    evaluate_dataset,
    reweight_action_scores,
    topk_accuracy,
)
from .harness import (
    ResultRecord,
    RunConfig,
    dump_attention,
    gradcheck_suite,
    run_ablation,
)
from .sap import (
    BranchFeature,
    ObjectBank,
    SapActivations,
    SapParams,
    VARIANTS,
    attend_relation,
    cross_stream_gate,
    integrate_privileged,
    pool_bank,
    sap_forward,
)
from .tensor import Tape, Tensor, grad_check
from .training import Labels, OptimState, cross_entropy_loss, train, train_epoch

__all__ = [
    "ActionPrior", "BankFileHeader", "BranchFeature", "Episode",
    "GeneratorSpec", "Labels", "ObjectBank", "OptimState", "Prediction",
    "ResultRecord", "RunConfig", "SapActivations", "SapParams", "Tape",
    "Tensor", "VARIANTS", "attend_relation", "cross_entropy_loss",
    "cross_stream_gate", "dump_attention", "estimate_action_prior",
    "evaluate_dataset", "generate_dataset", "generate_episode",
    "grad_check", "gradcheck_suite", "integrate_privileged", "pool_bank",
    "read_bank_file", "reweight_action_scores", "run_ablation",
    "sap_forward", "topk_accuracy", "train", "train_epoch",
    "write_bank_file",
]
