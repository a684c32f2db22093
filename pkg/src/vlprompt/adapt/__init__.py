"""Adaptation methods for a frozen VLM, each usable as an sklearn-style classifier."""
from .baselines import (
    KNNClassifier,
    LinearProbe,
    ProbeConfig,
    ZeroShotClassifier,
    fit_softmax_regression,
    knn_classify,
    knn_vote,
    linear_probe_train,
    zero_shot_classify,
)
from .ensemble import EnsembleSpec, PromptEnsemble, ensemble_classify, ensemble_scores
from .icl import InContextClassifier, icl_random, icl_rice, random_indices, rice_indices
from .prompts import (
    VARIANTS,
    PromptLearner,
    PromptParams,
    TrainConfig,
    co_prol_classify,
    co_prol_train,
    dumps_prompt,
    init_prompt,
    load_prompt,
    loads_prompt,
    man_prol_train,
    prol_classify,
    prol_train,
    prompt_classify,
    prompt_scores,
    robust_prol_classify,
    robust_prol_train,
    rpol_ss_train,
    save_prompt,
    train_prompt,
)

__all__ = [
    "KNNClassifier", "LinearProbe", "ProbeConfig", "ZeroShotClassifier", "fit_softmax_regression",
    "knn_classify", "knn_vote", "linear_probe_train", "zero_shot_classify",
    "EnsembleSpec", "PromptEnsemble", "ensemble_classify", "ensemble_scores",
    "InContextClassifier", "icl_random", "icl_rice", "random_indices", "rice_indices",
    "VARIANTS", "PromptLearner", "PromptParams", "TrainConfig", "co_prol_classify", "co_prol_train",
    "dumps_prompt", "init_prompt", "load_prompt", "loads_prompt", "man_prol_train", "prol_classify",
    "prol_train", "prompt_classify", "prompt_scores", "robust_prol_classify", "robust_prol_train",
    "rpol_ss_train", "save_prompt", "train_prompt",
]
