"""Soft prompts learned through the frozen VLM.

One trainer covers every variant. A variant fixes the prompt layout:

* ``prol``       ``<bos> Lc V(x@s) Lq``
* ``man_prol``   ``<bos> Lc V(x@s) this is a``  (only ``Lc`` is learned)
* ``co_prol``    ``<bos> (Lc + meta(mean V)) V(x@s) Lq``
* ``robust``     ``<bos> V(x@16) Lc1 V(x@24) Lc2 V(x@32) Lq``
* ``robust_ss``  the robust layout with one scale in all three slots

The class name is predicted at the position after the last prompt token.
"""
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import container
from .. import tensor as T
from ..exceptions import ConfigError, DivergenceError, InputError, NumericError
from ..optim import make_optimizer
from ..rng import Xoshiro256, derive_seed
from ..synth import PRETRAIN_SCALE, SCALES
from ..vlm import QUERY_TEMPLATE
from ._common import (
    FrozenVLMClassifier,
    as_images,
    check_label_set,
    label_token_ids,
    require_frozen,
    support_arrays,
    visual_tokens,
)

logger = logging.getLogger(__name__)

VARIANTS = ("prol", "man_prol", "co_prol", "robust", "robust_ss")
PROMPT_MAGIC = b"PRMT"
STREAM_PROMPT = 0x9A0


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 4
    lr: float = 1.0
    momentum: float = 0.0
    optimizer: str = "sgd"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or not self.lr > 0 or not 0 <= self.momentum < 1:
            raise ConfigError(f"invalid training config {asdict(self)}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


def default_scales(variant, scale=PRETRAIN_SCALE):
    if variant == "robust":
        return tuple(SCALES)
    if variant == "robust_ss":
        return (scale,) * 3
    return (scale,)


def check_layout(variant, scales, n_context):
    if variant not in VARIANTS:
        raise ConfigError(f"unknown prompt variant {variant!r}; expected one of {VARIANTS}")
    scales = tuple(int(s) for s in scales)
    if variant in ("robust", "robust_ss"):
        if len(scales) != 3:
            raise ConfigError(f"{variant} interleaves three visual slots, got scales {scales}")
        if n_context % 2:
            raise ConfigError(f"{variant} splits the context evenly; n_context={n_context} is odd")
        if variant == "robust" and scales[-1] != PRETRAIN_SCALE:
            raise ConfigError(f"the last robust slot must use the pretraining scale {PRETRAIN_SCALE}")
        if variant == "robust_ss" and len(set(scales)) != 1:
            raise ConfigError(f"robust_ss uses one scale in every slot, got {scales}")
    elif len(scales) != 1:
        raise ConfigError(f"{variant} takes a single image scale, got {scales}")
    return scales


@dataclass
class PromptParams:
    """Learned prompt tensors plus what is needed to rebuild the prompt.

    ``context`` holds one ``[l, d]`` array, or two equal halves for the
    robust layouts. ``query`` is None when the manual template is used.
    """
    variant: str
    context: tuple
    query: object
    scales: tuple
    metanet: dict = None
    config: dict = field(default_factory=dict)
    loss_curve: list = field(default_factory=list)
    test_loss_curve: list = field(default_factory=list)
    final_loss: float = None

    def __post_init__(self):
        self.context = tuple(np.asarray(c, dtype=np.float64) for c in self.context)
        self.scales = check_layout(self.variant, self.scales, self.n_context)
        expect = 2 if self.variant in ("robust", "robust_ss") else 1
        if len(self.context) != expect:
            raise ConfigError(f"{self.variant} needs {expect} context piece(s), got {len(self.context)}")
        if expect == 2 and self.context[0].shape != self.context[1].shape:
            raise ConfigError("split context halves differ in length")
        if (self.query is None) != (self.variant == "man_prol"):
            raise ConfigError("only man_prol replaces the learned query by the manual template")
        if (self.metanet is not None) != (self.variant == "co_prol"):
            raise ConfigError("a meta-network belongs to co_prol only")
        for name, arr in self.arrays().items():
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"prompt tensor {name} has non-finite entries")

    @property
    def n_context(self):
        return sum(len(c) for c in self.context)

    @property
    def n_query(self):
        return 0 if self.query is None else len(self.query)

    @property
    def n_learnable_tokens(self):
        return self.n_context + self.n_query

    def arrays(self):
        out = {f"context.{i}": c for i, c in enumerate(self.context)}
        if self.query is not None:
            out["query"] = np.asarray(self.query, dtype=np.float64)
        for k, v in (self.metanet or {}).items():
            out[f"metanet.{k}"] = np.asarray(v, dtype=np.float64)
        return out


# ---------------------------------------------------------------- init

def init_prompt(variant, d_model, n_context=64, n_query=8, seed=0, scales=None):
    """Soft tokens drawn from N(0, 1); context first, then query, then meta-net weights."""
    scales = check_layout(variant, scales or default_scales(variant), n_context)
    if n_context < 1 or (variant != "man_prol" and n_query < 1):
        raise ConfigError("prompt lengths must be positive")
    rng = Xoshiro256(derive_seed(STREAM_PROMPT, seed))
    ctx = rng.normal((n_context, d_model), std=1.0)
    query = rng.normal((n_query, d_model), std=1.0) if variant != "man_prol" else None
    context = (ctx[: n_context // 2], ctx[n_context // 2:]) if variant in ("robust", "robust_ss") else (ctx,)
    metanet = None
    if variant == "co_prol":
        hidden = max(1, d_model // 4)
        metanet = {"w1": rng.normal((d_model, hidden), std=np.sqrt(1.0 / d_model)),
                   "b1": np.zeros(hidden),
                   "w2": np.zeros((hidden, d_model)),
                   "b2": np.zeros(d_model)}
    return PromptParams(variant, context, query, scales, metanet)


# ---------------------------------------------------------------- forward

class _Prompt:
    """Tensors of one PromptParams and the embedding assembly for a batch."""

    def __init__(self, model, params, trainable=False):
        self.model = model
        self.params = params
        self.tensors = {k: T.Tensor(v.copy() if trainable else v, requires_grad=trainable)
                        for k, v in params.arrays().items()}
        wte = model.params["we.wte"].data
        tok = model.tokenizer
        self.bos = wte[[tok.bos_id]]
        self.template = wte[tok.encode(QUERY_TEMPLATE)]

    def learnable(self):
        return list(self.tensors.values())

    def _fixed(self, arr, batch):
        return T.Tensor(np.broadcast_to(arr, (batch,) + arr.shape).copy())

    def _context(self, i, batch, vis):
        ctx = self.tensors[f"context.{i}"]
        if self.params.variant != "co_prol":
            return T.expand(ctx, batch)
        tn = self.tensors
        h = T.gelu(T.add(T.matmul(T.Tensor(vis.mean(axis=1)), tn["metanet.w1"]), tn["metanet.b1"]))
        shift = T.add(T.matmul(h, tn["metanet.w2"]), tn["metanet.b2"])                 # B d
        return T.add(T.reshape(shift, (batch, 1, shift.shape[-1])), ctx)

    def embeddings(self, vis):
        """``vis`` lists one ``[B, m, d]`` array per visual slot."""
        B = len(vis[0])
        pieces = [self._fixed(self.bos, B)]
        if self.params.variant in ("robust", "robust_ss"):
            pieces += [T.Tensor(vis[0]), self._context(0, B, None), T.Tensor(vis[1]),
                       self._context(1, B, None), T.Tensor(vis[2])]
        else:
            pieces += [self._context(0, B, vis[0]), T.Tensor(vis[0])]
        if self.params.query is None:
            pieces.append(self._fixed(self.template, B))
        else:
            pieces.append(T.expand(self.tensors["query"], B))
        return T.concat_rows(pieces)

    def last_logits(self, vis):
        logits = self.model.logits(self.embeddings(vis))
        return T.take(logits, (slice(None), -1))

    def export(self):
        arr = {k: t.data.copy() for k, t in self.tensors.items()}
        n = sum(1 for k in arr if k.startswith("context."))
        meta = {k.split(".", 1)[1]: v for k, v in arr.items() if k.startswith("metanet.")}
        p = self.params
        return PromptParams(p.variant, tuple(arr[f"context.{i}"] for i in range(n)), arr.get("query"),
                            p.scales, meta or None, dict(p.config), list(p.loss_curve),
                            list(p.test_loss_curve), p.final_loss)


def slot_tokens(model, pixels, scales):
    """Visual tokens per slot; repeated scales share one array."""
    cache = {}
    for s in scales:
        if s not in cache:
            cache[s] = visual_tokens(model, pixels, s)
    return [cache[s] for s in scales]


def _loss(prompt, vis, targets):
    return T.cross_entropy(prompt.last_logits(vis), targets)


def _dataset_loss(prompt, vis, targets, batch=64):
    total = 0.0
    with T.no_grad():
        for i in range(0, len(targets), batch):
            sl = slice(i, i + batch)
            total += _loss(prompt, [v[sl] for v in vis], targets[sl]).item() * len(targets[sl])
    return total / len(targets)


def train_prompt(model, pixels, labels, params, config=None, eval_set=None):
    """Minimise the label cross-entropy of ``params`` on (pixels, labels).

    Returns a new PromptParams with the per-epoch mean training loss, the
    optional held-out loss per epoch and the final loss over the whole
    support set.
    """
    require_frozen(model)
    cfg = config or TrainConfig()
    if len(pixels) == 0:
        raise InputError("empty support set")
    digest = model.digest()
    t0 = time.time()
    prompt = _Prompt(model, params, trainable=True)
    vis = slot_tokens(model, pixels, params.scales)
    targets = label_token_ids(model, labels)
    if eval_set is not None:
        ev_pix, ev_lab = support_arrays(*eval_set)
        ev_vis = slot_tokens(model, ev_pix, params.scales)
        ev_targets = label_token_ids(model, ev_lab)
    opt = make_optimizer(cfg.optimizer, prompt.learnable(), cfg.lr, momentum=cfg.momentum)
    rng = np.random.default_rng(derive_seed(STREAM_PROMPT, cfg.seed, 0x5EED))
    curve, test_curve = [], []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(targets))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            opt.zero_grad()
            try:
                with T.Tape() as tape:
                    loss = _loss(prompt, [v[idx] for v in vis], targets[idx])
            except NumericError:
                raise DivergenceError(epoch, cfg.lr, float("nan")) from None
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(epoch, cfg.lr, value)
            tape.backward(loss)
            opt.step()
            if not all(np.all(np.isfinite(t.data)) for t in prompt.learnable()):
                raise DivergenceError(epoch, cfg.lr, value)
            total += value * len(idx)
        curve.append(total / len(targets))
        if eval_set is not None:
            test_curve.append(_dataset_loss(prompt, ev_vis, ev_targets))
    out = prompt.export()
    out.config = asdict(cfg)
    out.loss_curve = curve
    out.test_loss_curve = test_curve
    out.final_loss = _dataset_loss(prompt, vis, targets)
    if model.digest() != digest:
        raise AssertionError("frozen model changed during prompt training")
    logger.info("%s trained %d epochs in %.1fs, final loss %.4f", params.variant, cfg.epochs,
                time.time() - t0, out.final_loss)
    return out


def prompt_scores(model, params, pixels, label_set, batch=64):
    """Log-likelihood of each label, ``[N, L]``; test images are resampled per slot."""
    require_frozen(model)
    labels = check_label_set(label_set)
    prompt = _Prompt(model, params)
    ids = label_token_ids(model, labels)
    out = []
    with T.no_grad():
        for i in range(0, len(pixels), batch):
            logits = prompt.last_logits(slot_tokens(model, pixels[i:i + batch], params.scales)).data
            z = logits - logits.max(axis=-1, keepdims=True)
            lp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
            out.append(lp[:, ids])
    return np.concatenate(out)


# ---------------------------------------------------------------- estimator

class PromptLearner(FrozenVLMClassifier):
    """Learn soft prompt tokens on a support set with the VLM held fixed.

    ``scales`` defaults per variant: ``(32,)`` for the single-image layouts,
    ``(16, 24, 32)`` for ``robust``. ``robust_ss`` takes a one-element tuple
    and repeats it.
    """

    def __init__(self, model=None, variant="prol", n_context=64, n_query=8, scales=None,
                 epochs=50, batch_size=4, lr=1.0, momentum=0.0, optimizer="sgd", seed=0):
        self.model = model
        self.variant = variant
        self.n_context = n_context
        self.n_query = n_query
        self.scales = scales
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.optimizer = optimizer
        self.seed = seed

    def _resolved_scales(self):
        if self.scales is None:
            return default_scales(self.variant)
        scales = tuple(self.scales)
        if self.variant == "robust_ss" and len(scales) == 1:
            scales = scales * 3
        return scales

    def train_config(self):
        return TrainConfig(self.epochs, self.batch_size, self.lr, self.momentum, self.optimizer, self.seed)

    def fit(self, X, y=None, eval_set=None):
        require_frozen(self.model)
        cfg = self.train_config()
        pixels, labels = support_arrays(X, y)
        init = init_prompt(self.variant, self.model.d_model, self.n_context, self.n_query,
                           cfg.seed, self._resolved_scales())
        self.params_ = train_prompt(self.model, pixels, labels, init, cfg, eval_set)
        self.classes_ = np.unique(labels)
        self.loss_curve_ = self.params_.loss_curve
        self.test_loss_curve_ = self.params_.test_loss_curve
        self.final_loss_ = self.params_.final_loss
        return self

    def _scores(self, pixels, labels):
        return prompt_scores(self.model, self.params_, pixels, labels)


# ---------------------------------------------------------------- function forms

def _train(model, support, variant, n_context, n_query, config, scales=None):
    cfg = config or TrainConfig()
    pixels, labels = support_arrays(support)
    init = init_prompt(variant, model.d_model, n_context, n_query, cfg.seed, scales)
    return train_prompt(model, pixels, labels, init, cfg)


def prol_train(model, support, n_context=64, n_query=8, config=None, scale=PRETRAIN_SCALE):
    return _train(model, support, "prol", n_context, n_query, config, (scale,))


def man_prol_train(model, support, n_context=64, config=None, scale=PRETRAIN_SCALE):
    return _train(model, support, "man_prol", n_context, 0, config, (scale,))


def co_prol_train(model, support, n_context=64, n_query=8, config=None):
    return _train(model, support, "co_prol", n_context, n_query, config)


def robust_prol_train(model, support, scales=SCALES, n_context=64, n_query=8, config=None):
    return _train(model, support, "robust", n_context, n_query, config, tuple(scales))


def rpol_ss_train(model, support, scale, n_context=64, n_query=8, config=None):
    return _train(model, support, "robust_ss", n_context, n_query, config, (scale,) * 3)


def prompt_classify(model, params, image, label_set):
    labels = check_label_set(label_set)
    if len(labels) == 1:
        return int(labels[0])
    scores = prompt_scores(model, params, as_images(np.asarray(image)[None]), labels)
    return int(labels[np.argmax(scores[0])])


def prol_classify(model, params, image, label_set):
    if params.variant not in ("prol", "man_prol"):
        raise ConfigError(f"prol_classify expects prol or man_prol params, got {params.variant}")
    return prompt_classify(model, params, image, label_set)


def co_prol_classify(model, params, image, label_set):
    if params.variant != "co_prol":
        raise ConfigError(f"co_prol_classify expects co_prol params, got {params.variant}")
    return prompt_classify(model, params, image, label_set)


def robust_prol_classify(model, params, image, label_set):
    if params.variant not in ("robust", "robust_ss"):
        raise ConfigError(f"robust_prol_classify expects robust params, got {params.variant}")
    return prompt_classify(model, params, image, label_set)


# ---------------------------------------------------------------- persistence

def dumps_prompt(params):
    meta = {"variant": params.variant, "scales": list(params.scales), "config": params.config,
            "loss_curve": params.loss_curve, "test_loss_curve": params.test_loss_curve,
            "final_loss": params.final_loss}
    return container.dumps(PROMPT_MAGIC, params.arrays(), seed=int(params.config.get("seed", 0)),
                           meta=meta)


def loads_prompt(buf):
    tensors, _seed, _frozen, _words, meta = container.loads(buf, PROMPT_MAGIC)
    n = sum(1 for k in tensors if k.startswith("context."))
    metanet = {k.split(".", 1)[1]: v for k, v in tensors.items() if k.startswith("metanet.")}
    return PromptParams(meta["variant"], tuple(tensors[f"context.{i}"] for i in range(n)),
                        tensors.get("query"), tuple(meta["scales"]), metanet or None,
                        meta.get("config", {}), meta.get("loss_curve", []),
                        meta.get("test_loss_curve", []), meta.get("final_loss"))


def save_prompt(params, path):
    with open(path, "wb") as fh:
        fh.write(dumps_prompt(params))
    return path


def load_prompt(path):
    with open(path, "rb") as fh:
        return loads_prompt(fh.read())
