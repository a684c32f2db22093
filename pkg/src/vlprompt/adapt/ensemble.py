"""Loss-averaging ensembles of learned prompts."""
from dataclasses import dataclass

import numpy as np

from ..exceptions import ConfigError, InputError
from ..synth import SCALES
from ._common import FrozenVLMClassifier, as_images, check_label_set, require_frozen, support_arrays
from .prompts import PromptLearner, prompt_scores


@dataclass
class EnsembleSpec:
    """``SS`` members share one image scale; ``MS`` members cover 16, 24 and 32 once each."""
    members: list
    mode: str = "SS"

    def __post_init__(self):
        self.members = list(self.members)
        if not self.members:
            raise InputError("an ensemble needs at least one member")
        if self.mode not in ("SS", "MS"):
            raise ConfigError(f"ensemble mode must be SS or MS, got {self.mode!r}")
        scales = [m.scales for m in self.members]
        if self.mode == "SS" and len(set(scales)) != 1:
            raise ConfigError(f"SS members must share one scale, got {scales}")
        if self.mode == "MS":
            flat = sorted(s for sc in scales for s in sc)
            if len(set(scales)) != len(scales) or flat != sorted(SCALES):
                raise ConfigError(f"MS members need distinct scales covering {SCALES}, got {scales}")

    @property
    def member_scales(self):
        return [m.scales for m in self.members]


def ensemble_scores(model, spec, pixels, label_set):
    """Mean over members of per-label log-likelihood, i.e. the negated mean loss."""
    return np.mean([prompt_scores(model, m, pixels, label_set) for m in spec.members], axis=0)


def ensemble_classify(model, spec, image, label_set):
    labels = check_label_set(label_set)
    scores = ensemble_scores(model, spec, as_images(np.asarray(image)[None]), labels)
    return int(labels[np.argmax(scores[0])])


class PromptEnsemble(FrozenVLMClassifier):
    """Three ProL runs combined by averaging their label losses.

    ``mode="SS"`` trains with seeds ``seed, seed+1, seed+2`` at scale 32;
    ``mode="MS"`` uses one seed and gives each member its own scale.
    """

    def __init__(self, model=None, mode="SS", n_members=3, n_context=64, n_query=8,
                 epochs=50, batch_size=4, lr=1.0, momentum=0.0, optimizer="sgd", seed=0,
                 same_seed=False):
        self.model = model
        self.mode = mode
        self.n_members = n_members
        self.n_context = n_context
        self.n_query = n_query
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.optimizer = optimizer
        self.seed = seed
        self.same_seed = same_seed

    def _member_settings(self):
        if self.mode == "MS":
            return [(self.seed, (s,)) for s in SCALES]
        if self.mode != "SS":
            raise ConfigError(f"ensemble mode must be SS or MS, got {self.mode!r}")
        step = 0 if self.same_seed else 1
        return [(self.seed + step * i, (SCALES[-1],)) for i in range(self.n_members)]

    def fit(self, X, y=None):
        require_frozen(self.model)
        pixels, labels = support_arrays(X, y)
        members = []
        for seed, scales in self._member_settings():
            learner = PromptLearner(self.model, "prol", self.n_context, self.n_query, scales,
                                    self.epochs, self.batch_size, self.lr, self.momentum, self.optimizer,
                                    seed=seed)
            members.append(learner.fit(pixels, labels).params_)
        self.spec_ = EnsembleSpec(members, self.mode)
        self.classes_ = np.unique(labels)
        return self

    def _scores(self, pixels, labels):
        return ensemble_scores(self.model, self.spec_, pixels, labels)
