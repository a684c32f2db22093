"""Experiment configs, the base/novel x shift evaluation grid and the token ablation."""
import csv
import io
import json
import logging
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .adapt import (
    InContextClassifier,
    KNNClassifier,
    LinearProbe,
    PromptEnsemble,
    PromptLearner,
    TrainConfig,
    ZeroShotClassifier,
)
from .exceptions import ConfigError, FrozenError
from .rng import derive_seed
from .synth import (
    PRETRAIN_SCALE,
    STREAM_ADV_POOL,
    STREAM_PROBE,
    Shift,
    build_adv_filtered,
    build_support,
    make_splits,
    render,
    test_samples,
)
from .vlm import load

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CSV_COLUMNS = ("method", "shift", "regime", "n_classes", "seed", "accuracy", "n_test", "wall_ms")
DEFAULT_SHIFTS = ("in_dist", "v2_resample", "rendition", "corruption:blur:5", "sketch", "adv_filtered")

# method id -> (estimator factory, regimes it can score)
_BOTH = ("base", "novel")


def _prompt(variant, scales=None):
    def make(model, cfg, seed):
        return PromptLearner(model, variant, cfg.n_context, cfg.n_query, scales, seed=seed, **cfg.train)
    return make


def _ensemble(mode):
    def make(model, cfg, seed):
        return PromptEnsemble(model, mode, n_context=cfg.n_context, n_query=cfg.n_query, seed=seed,
                              **cfg.train)
    return make


METHODS = {
    "knn": (lambda model, cfg, seed: KNNClassifier(model, 8), ("base",)),
    "zero_shot": (lambda model, cfg, seed: ZeroShotClassifier(model), _BOTH),
    "supervised_fs": (lambda model, cfg, seed: LinearProbe(model), ("base",)),
    "supervised_star": (lambda model, cfg, seed: LinearProbe(model), ("base",)),
    "icl_random": (lambda model, cfg, seed: InContextClassifier(model, "random", cfg.n_shots, seed=seed), _BOTH),
    "icl_rice": (lambda model, cfg, seed: InContextClassifier(model, "rice", cfg.n_shots, seed=seed), _BOTH),
    "prol": (_prompt("prol"), _BOTH),
    "man_prol": (_prompt("man_prol"), _BOTH),
    "co_prol": (_prompt("co_prol"), _BOTH),
    "robust_prol": (_prompt("robust"), _BOTH),
    "rpol_ss16": (_prompt("robust_ss", (16,)), _BOTH),
    "rpol_ss24": (_prompt("robust_ss", (24,)), _BOTH),
    "rpol_ss32": (_prompt("robust_ss", (32,)), _BOTH),
    "ensemble_ss": (_ensemble("SS"), _BOTH),
    "ensemble_ms": (_ensemble("MS"), _BOTH),
}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"seed"}


@dataclass
class ExperimentConfig:
    """Everything a run needs; validated as a whole before any compute.

    ``record_timing`` is off by default so that repeated runs write identical
    bytes; with it on, ``wall_ms`` holds measured prediction time.
    """
    methods: list
    n_base: list = field(default_factory=lambda: [8])
    shifts: list = field(default_factory=lambda: list(DEFAULT_SHIFTS))
    seeds: list = field(default_factory=lambda: [0])
    train: dict = field(default_factory=dict)
    checkpoint: str = None
    out_dir: str = None
    n_context: int = 64
    n_query: int = 8
    n_shots: int = 8
    n_test_per_class: int = 50
    support_per_class: int = 5
    probe_pool_per_class: int = 100
    adv_pool_per_class: int = 400
    record_timing: bool = False
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema_version {self.schema_version}")
        if isinstance(self.methods, str):
            self.methods = [self.methods]
        if isinstance(self.n_base, int):
            self.n_base = [self.n_base]
        self.methods = list(self.methods)
        self.n_base = [int(n) for n in self.n_base]
        self.seeds = [int(s) for s in self.seeds]
        self.shifts = list(self.shifts)
        errors = []
        unknown = [m for m in self.methods if m not in METHODS]
        if not self.methods or unknown:
            errors.append(f"unknown or missing method ids {unknown}; known: {sorted(METHODS)}")
        if not self.n_base or any(n not in (8, 16, 24, 32) for n in self.n_base):
            errors.append(f"n_base values must be in {{8, 16, 24, 32}}, got {self.n_base}")
        if not self.seeds or any(s < 0 for s in self.seeds):
            errors.append(f"seeds must be a non-empty list of non-negative ints, got {self.seeds}")
        for tag in self.shifts:
            try:
                Shift.from_tag(tag)
            except Exception as exc:            # noqa: BLE001 - collected into one report
                errors.append(f"bad shift {tag!r}: {exc}")
        if not self.shifts:
            errors.append("shift list is empty")
        bad_train = sorted(set(self.train) - _TRAIN_KEYS)
        if bad_train:
            errors.append(f"unknown train overrides {bad_train}; allowed: {sorted(_TRAIN_KEYS)}")
        else:
            try:
                TrainConfig(**self.train)
            except ConfigError as exc:
                errors.append(str(exc))
        for name in ("n_context", "n_query", "n_shots", "n_test_per_class", "support_per_class",
                     "probe_pool_per_class", "adv_pool_per_class"):
            if int(getattr(self, name)) < 1:
                errors.append(f"{name} must be positive")
        if any(m in ("robust_prol", "rpol_ss16", "rpol_ss24", "rpol_ss32") for m in self.methods) \
                and self.n_context % 2:
            errors.append(f"robust prompts split the context evenly; n_context={self.n_context} is odd")
        if any(m in ("icl_random", "icl_rice") for m in self.methods) \
                and self.n_shots > self.support_per_class * min(self.n_base or [8]):
            errors.append("n_shots exceeds the support set size")
        if errors:
            raise ConfigError("invalid experiment config: " + "; ".join(errors))

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        extra = sorted(set(data) - known)
        if extra:
            raise ConfigError(f"unknown config keys {extra}")
        return cls(**data)

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        return asdict(self)


@dataclass
class ResultRecord:
    method: str
    shift: str
    regime: str
    n_classes: int
    seed: int
    accuracy: float
    n_test: int
    wall_ms: int = 0
    correct: int = 0

    @classmethod
    def from_counts(cls, method, shift, regime, n_classes, seed, correct, n_test, wall_ms=0):
        if not 0 <= correct <= n_test:
            raise ValueError("correct must lie in [0, n_test]")
        acc = correct / n_test if n_test else float("nan")
        return cls(method, shift, regime, int(n_classes), int(seed), acc, int(n_test), int(wall_ms), int(correct))

    def sort_key(self):
        return (self.method, self.shift, self.regime, self.n_classes, self.seed)

    def row(self):
        return [self.method, self.shift, self.regime, self.n_classes, self.seed,
                f"{self.accuracy:.6f}", self.n_test, self.wall_ms]


# ---------------------------------------------------------------- data for one seed

def _pool(classes, stream, seed, per_class):
    return [render(int(c), PRETRAIN_SCALE, derive_seed(stream, seed, int(c), i))
            for c in classes for i in range(per_class)]


def _adv_filtered(model, classes, seed, cfg):
    """Per class, pool images the Supervised* probe misclassifies."""
    probe_pool = _pool(classes, STREAM_PROBE, seed, cfg.probe_pool_per_class)
    probe = LinearProbe(model).fit(probe_pool)
    out = []
    for c in classes:
        pool = _pool([c], STREAM_ADV_POOL, seed, cfg.adv_pool_per_class)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            kept = build_adv_filtered(pool, probe, requested=cfg.n_test_per_class)
        for w in caught:
            logger.warning("class %d: %s", c, w.message)
        out += kept
    return out


def _test_set(model, classes, tag, seed, cfg, cache):
    key = (tuple(classes), tag, seed)
    if key not in cache:
        shift = Shift.from_tag(tag)
        if shift.kind == "adv_filtered":
            samples = _adv_filtered(model, classes, seed, cfg)
        else:
            samples = test_samples(classes, shift, seed, per_class=cfg.n_test_per_class)
        pixels = np.stack([s.pixels for s in samples]) if samples else np.zeros((0, 32, 32, 3))
        cache[key] = (pixels, np.array([s.label for s in samples], dtype=np.int64))
    return cache[key]


def _run_cell(task):
    """All records for one (checkpoint, config, n_base, seed)."""
    cfg_dict, n_base, seed = task
    cfg = ExperimentConfig.from_dict(cfg_dict)
    model = load(cfg.checkpoint)
    base, novel = make_splits(n_base, seed=seed)
    support = build_support(base, seed, per_class=cfg.support_per_class)
    regimes = {"base": sorted(int(c) for c in base), "novel": sorted(int(c) for c in novel)}
    cache = {}
    digest = model.digest()
    records = []
    for method in cfg.methods:
        factory, allowed = METHODS[method]
        est = factory(model, cfg, seed)
        if method == "supervised_star":
            est.fit(_pool(regimes["base"], STREAM_PROBE, seed, cfg.probe_pool_per_class))
        else:
            est.fit(support)
        for tag in cfg.shifts:
            for regime in ("base", "novel"):
                if regime not in allowed:
                    continue
                labels = regimes[regime]
                pixels, y = _test_set(model, labels, tag, seed, cfg, cache)
                t0 = time.perf_counter()
                correct = int(np.count_nonzero(est.predict(pixels, label_set=labels) == y)) if len(y) else 0
                wall = int(round((time.perf_counter() - t0) * 1000)) if cfg.record_timing else 0
                records.append(ResultRecord.from_counts(method, tag, regime, len(labels), seed,
                                                        correct, len(y), wall))
        logger.info("seed %d n_base %d: %s done", seed, n_base, method)
    if model.digest() != digest:
        raise AssertionError("frozen model changed during evaluation")
    return records


def run(config, jobs=1, write=True):
    """Evaluate every (method, shift, regime, n_base, seed) cell of ``config``."""
    if isinstance(config, dict):
        config = ExperimentConfig.from_dict(config)
    if not config.checkpoint or not os.path.exists(config.checkpoint):
        raise ConfigError(f"checkpoint not found: {config.checkpoint!r}")
    if not load(config.checkpoint).frozen:
        raise FrozenError(f"checkpoint {config.checkpoint} is not frozen")
    tasks = [(config.to_dict(), n, s) for n in config.n_base for s in config.seeds]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(_run_cell, tasks))
    else:
        chunks = [_run_cell(t) for t in tasks]
    records = sorted((r for chunk in chunks for r in chunk), key=ResultRecord.sort_key)
    if write and config.out_dir:
        write_records(records, config.out_dir)
    return records


# ---------------------------------------------------------------- persistence

def records_csv(records):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


def write_records(records, out_dir, stem="results"):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, f"{stem}.csv"), "w", encoding="utf-8", newline="") as fh:
        fh.write(records_csv(records))
    with open(os.path.join(out_dir, f"{stem}.json"), "w", encoding="utf-8") as fh:
        json.dump([asdict(r) for r in records], fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_records(path):
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [ResultRecord(r["method"], r["shift"], r["regime"], int(r["n_classes"]), int(r["seed"]),
                         float(r["accuracy"]), int(r["n_test"]), int(r["wall_ms"]),
                         int(round(float(r["accuracy"]) * int(r["n_test"]))))
            for r in rows]


# ---------------------------------------------------------------- token ablation

@dataclass
class LossCurve:
    method: str
    n_context: int
    seed: int
    split: str
    losses: list


ABLATION_METHODS = {"prol": "prol", "robust_prol": "robust"}


def ablate_tokens(config, token_counts, eval_per_class=10):
    """Train/held-out loss per epoch for each context length and prompt method.

    Held-out images are fresh in-distribution renders of the base classes.
    """
    if isinstance(config, dict):
        config = ExperimentConfig.from_dict(config)
    counts = [int(c) for c in token_counts]
    methods = [m for m in config.methods if m in ABLATION_METHODS] or ["prol"]
    if not counts or any(c < 1 for c in counts):
        raise ConfigError(f"token counts must be positive, got {counts}")
    if "robust_prol" in methods and any(c % 2 for c in counts):
        raise ConfigError(f"robust prompts need even token counts, got {counts}")
    model = load(config.checkpoint)
    if not model.frozen:
        raise FrozenError(f"checkpoint {config.checkpoint} is not frozen")
    curves = []
    for seed in config.seeds:
        base, _ = make_splits(config.n_base[0], seed=seed)
        support = build_support(base, seed, per_class=config.support_per_class)
        held = test_samples(sorted(base), Shift(), derive_seed(0xAB1A7E, seed), per_class=eval_per_class)
        for method in methods:
            for c in counts:
                est = PromptLearner(model, ABLATION_METHODS[method], c, config.n_query, seed=seed, **config.train)
                est.fit(support, eval_set=(held, None))
                curves.append(LossCurve(method, c, seed, "train", list(est.loss_curve_)))
                curves.append(LossCurve(method, c, seed, "test", list(est.test_loss_curve_)))
    return curves


def curves_csv(curves):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("method", "n_context", "seed", "split", "epoch", "loss"))
    for c in curves:
        for e, v in enumerate(c.losses):
            w.writerow((c.method, c.n_context, c.seed, c.split, e + 1, f"{v:.6f}"))
    return buf.getvalue()


def read_curves(path):
    """Inverse of :func:`curves_csv`."""
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    grouped = {}
    for r in rows:
        key = (r["method"], int(r["n_context"]), int(r["seed"]), r["split"])
        grouped.setdefault(key, []).append((int(r["epoch"]), float(r["loss"])))
    return [LossCurve(m, n, s, split, [v for _, v in sorted(pts)])
            for (m, n, s, split), pts in grouped.items()]
