"""Tokenizer, prompt assembly, the frozen VLM, its pretraining and checkpoints."""
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import container
from . import tensor as T
from .exceptions import (
    ConfigError,
    FrozenError,
    InputError,
    LengthError,
    VocabError,
)
from .nn import LMConfig, ParamSet, VEConfig, config_dict, init_params, lm_forward, ve_forward
from .optim import clip_grad_norm, make_optimizer
from .rng import derive_seed
from .synth import CLASS_NAMES, N_CLASSES, PRETRAIN_SCALE, STREAM_PRETRAIN, assert_in_dist, render

logger = logging.getLogger(__name__)

SPECIALS = ("<pad>", "<bos>", "<eoc>")
TEMPLATE_WORDS = ("this", "is", "a", "photo", "of")
QUERY_TEMPLATE = ("this", "is", "a")
CHECKPOINT_MAGIC = b"VLMC"


class Tokenizer:
    """Bijective word/id map; every class name is a single token."""

    def __init__(self, words=None):
        self.words = list(words) if words is not None else list(SPECIALS + TEMPLATE_WORDS + CLASS_NAMES)
        self._ids = {w: i for i, w in enumerate(self.words)}
        if len(self._ids) != len(self.words):
            raise VocabError("duplicate words in vocabulary")

    def __len__(self):
        return len(self.words)

    def __eq__(self, other):
        return isinstance(other, Tokenizer) and self.words == other.words

    def id(self, word):
        try:
            return self._ids[word]
        except KeyError:
            raise VocabError(f"unknown token {word!r}") from None

    def encode(self, words):
        if isinstance(words, str):
            words = words.split()
        return [self.id(w) for w in words]

    def decode(self, ids):
        return [self.words[i] for i in ids]

    def class_token(self, class_id):
        return self.id(CLASS_NAMES[class_id])

    @property
    def pad_id(self):
        return self.id("<pad>")

    @property
    def bos_id(self):
        return self.id("<bos>")

    @property
    def eoc_id(self):
        return self.id("<eoc>")


# ---------------------------------------------------------------- prompt segments

@dataclass
class VisualSeg:
    """Visual tokens, ``[m, d]`` or batched ``[B, m, d]``."""
    tokens: object

    def __len__(self):
        return self.tokens.shape[-2]


@dataclass
class TextSeg:
    ids: tuple

    def __post_init__(self):
        self.ids = tuple(int(i) for i in self.ids)

    def __len__(self):
        return len(self.ids)


@dataclass
class SoftSeg:
    """Free embeddings occupying ordinary positions, ``[l, d]`` or ``[B, l, d]``."""
    tokens: object
    learnable: bool = True

    def __len__(self):
        return self.tokens.shape[-2]


def _seg_name(seg):
    return type(seg).__name__


# ---------------------------------------------------------------- model

@dataclass
class CorpusConfig:
    n_per_class: int = 200
    max_images_per_doc: int = 4
    pack_len: int = 160
    bursty: float = 0.5
    seed: int = 0


@dataclass
class OptConfig:
    optimizer: str = "sgd"
    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 10
    batch_size: int = 8
    grad_clip: float = 1.0
    weight_decay: float = 0.0
    warmup_steps: int = 0
    schedule: str = "constant"

    def __post_init__(self):
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr schedule {self.schedule!r}")


# Settings that train the default model in a few minutes on one core.
DESK_OPT = dict(optimizer="adam", lr=3e-3, epochs=45, warmup_steps=200, schedule="cosine")


def desk_configs(overrides=None):
    """``(LMConfig, VEConfig, CorpusConfig, OptConfig)`` for the documented desk run.

    ``overrides`` may hold ``lm``, ``ve``, ``corpus`` and ``opt`` dicts.
    """
    overrides = dict(overrides or {})
    unknown = sorted(set(overrides) - {"lm", "ve", "corpus", "opt"})
    if unknown:
        raise ConfigError(f"unknown pretraining config sections {unknown}")
    tok_size = len(Tokenizer())
    try:
        lm = LMConfig(**{"vocab_size": tok_size, **overrides.get("lm", {})})
        ve = VEConfig(**{"d_model": lm.d_model, **overrides.get("ve", {})})
        cc = CorpusConfig(**overrides.get("corpus", {}))
        oc = OptConfig(**{**DESK_OPT, **overrides.get("opt", {})})
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return lm, ve, cc, oc


class VLModel:
    """Visual encoder + word embedding + causal LM sharing one :class:`ParamSet`.

    Parameters are namespaced ``ve.*``, ``we.*`` (token and position tables)
    and ``lm.*``. Once :meth:`freeze` has run, every array is read-only.
    """

    def __init__(self, tokenizer, lm_cfg, ve_cfg, params, root_seed=0, frozen=False, meta=None):
        self.tokenizer = tokenizer
        self.lm_cfg = lm_cfg
        self.ve_cfg = ve_cfg
        self.params = params
        self.root_seed = int(root_seed)
        self.meta = dict(meta or {})
        self.frozen = False
        if frozen:
            self.freeze()

    @classmethod
    def create(cls, seed=0, lm_cfg=None, ve_cfg=None, tokenizer=None):
        tokenizer = tokenizer or Tokenizer()
        lm_cfg = lm_cfg or LMConfig(vocab_size=len(tokenizer))
        if lm_cfg.vocab_size != len(tokenizer):
            raise ConfigError(f"vocab_size {lm_cfg.vocab_size} != tokenizer size {len(tokenizer)}")
        ve_cfg = ve_cfg or VEConfig(d_model=lm_cfg.d_model)
        return cls(tokenizer, lm_cfg, ve_cfg, init_params(lm_cfg, ve_cfg, seed), root_seed=seed)

    @property
    def d_model(self):
        return self.lm_cfg.d_model

    @property
    def ve_params(self):
        return self.params.subset("ve.")

    @property
    def we_params(self):
        return self.params.subset("we.")

    @property
    def lm_params(self):
        return self.params.subset("lm.")

    def freeze(self):
        self.params.freeze()
        self.frozen = True
        return self

    def digest(self):
        return self.params.digest()

    def _require_frozen(self):
        if not self.frozen:
            raise FrozenError("scoring requires a frozen model")

    # -- embedding ---------------------------------------------------------

    def visual_tokens(self, pixels):
        """``[m, d]`` for one image, ``[B, m, d]`` for a stack."""
        return ve_forward(self.params, pixels, self.ve_cfg)

    def text_embeddings(self, ids):
        return T.embedding_lookup(self.params["we.wte"], np.asarray(ids, dtype=np.int64))

    def assemble(self, segments):
        """Concatenate segments into ``[T, d]`` (or ``[B, T, d]`` if any segment is batched)."""
        if not segments:
            raise LengthError("empty prompt: at least one token is required")
        batch = None
        for seg in segments:
            toks = getattr(seg, "tokens", None)
            if toks is not None:
                if toks.shape[-1] != self.d_model:
                    raise ConfigError(f"{_seg_name(seg)} width {toks.shape[-1]} != d_model {self.d_model}")
                if toks.ndim == 3:
                    if batch is not None and batch != toks.shape[0]:
                        raise InputError("batched segments disagree on batch size")
                    batch = toks.shape[0]
        total = sum(len(s) for s in segments)
        if total > self.lm_cfg.max_seq_len:
            parts = ", ".join(f"{_seg_name(s)}={len(s)}" for s in segments)
            raise LengthError(f"prompt of {total} tokens exceeds max_seq_len={self.lm_cfg.max_seq_len} ({parts})")
        if total == 0:
            raise LengthError("empty prompt: at least one token is required")
        pieces = []
        for seg in segments:
            if len(seg) == 0:
                continue
            if isinstance(seg, TextSeg):
                t = self.text_embeddings(list(seg.ids))
            elif isinstance(seg, (VisualSeg, SoftSeg)):
                t = seg.tokens if isinstance(seg.tokens, T.Tensor) else T.Tensor(seg.tokens)
            else:
                raise TypeError(f"not a prompt segment: {seg!r}")
            if batch is not None and t.ndim == 2:
                t = T.expand(t, batch)
            pieces.append(t)
        return pieces[0] if len(pieces) == 1 else T.concat_rows(pieces)

    def logits(self, embeddings):
        return lm_forward(self.params, embeddings, self.lm_cfg)

    # -- scoring -----------------------------------------------------------

    def label_ids(self, label):
        """Token ids for a label given as class id, class name or token list."""
        if isinstance(label, (int, np.integer)):
            if not 0 <= label < N_CLASSES:
                raise VocabError(f"class id {label} out of range")
            return [self.tokenizer.class_token(int(label))]
        if isinstance(label, str):
            return self.tokenizer.encode(label)
        ids = list(label)
        for i in ids:
            if not 0 <= int(i) < len(self.tokenizer):
                raise VocabError(f"token id {i} out of range")
        return [int(i) for i in ids]

    def score_label(self, prefix, label):
        """Sum of log P(label_j | prefix, label_<j); no length normalisation."""
        self._require_frozen()
        ids = self.label_ids(label)
        if not ids:
            raise VocabError("empty label")
        segs = list(prefix) + [TextSeg(ids[:-1])] if len(ids) > 1 else list(prefix)
        with T.no_grad():
            emb = self.assemble(segs)
            n_prefix = emb.shape[-2] - (len(ids) - 1)
            logp = T.log_softmax_rows(self.logits(emb)).data
        pos = np.arange(n_prefix - 1, n_prefix - 1 + len(ids))
        return float(logp[..., pos, ids].sum(axis=-1)) if logp.ndim == 2 else logp[:, pos, ids].sum(axis=-1)

    def next_token_logprobs(self, emb):
        """Log-softmax at the final position of ``[B, T, d]`` (no tape)."""
        with T.no_grad():
            logits = self.logits(emb)
        last = logits.data[..., -1, :]
        z = last - last.max(axis=-1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def label_scores(self, emb, label_set):
        """Per-label log-likelihood ``[B, L]`` for single-token labels, columns in ``label_set`` order."""
        self._require_frozen()
        ids = [self.label_ids(c) for c in label_set]
        if any(len(i) != 1 for i in ids):
            raise VocabError("label_scores handles single-token labels only")
        lp = self.next_token_logprobs(emb)
        return lp[..., [i[0] for i in ids]]

    def bos_segment(self):
        return TextSeg([self.tokenizer.bos_id])

    def query_segment(self):
        return TextSeg(self.tokenizer.encode(QUERY_TEMPLATE))

    def classify(self, context, image, query, label_set):
        """Argmax over ``label_set`` of the label log-likelihood after (<bos>, context, V(image), query)."""
        self._require_frozen()
        labels = sorted(set(int(c) for c in label_set))
        if not labels:
            raise InputError("label_set is empty")
        if len(labels) == 1:
            return labels[0]
        vis = image if isinstance(image, VisualSeg) else VisualSeg(self.visual_tokens(image))
        prefix = [self.bos_segment(), *context, vis, *query]
        if all(len(self.label_ids(c)) == 1 for c in labels):
            with T.no_grad():
                emb = self.assemble(prefix)
            scores = self.label_scores(emb, labels)
        else:
            scores = np.array([self.score_label(prefix, c) for c in labels])
        return labels[int(np.argmax(scores))]


def predict_from_scores(scores, labels):
    """Row-wise argmax; ``labels`` must be sorted so ties go to the lowest id."""
    labels = np.asarray(labels)
    return labels[np.argmax(scores, axis=-1)]


# ---------------------------------------------------------------- pretraining

def _corpus_images(cfg):
    keys = [(c, j) for c in range(N_CLASSES) for j in range(cfg.n_per_class)]
    samples = [render(c, PRETRAIN_SCALE, derive_seed(STREAM_PRETRAIN, cfg.seed, c, j)) for c, j in keys]
    return samples


def _make_documents(cfg, n_images, rng):
    """Documents are lists of image indices; bursty ones reuse at most two classes."""
    n_docs = max(1, int(round(n_images / ((1 + cfg.max_images_per_doc) / 2))))
    docs = []
    for _ in range(n_docs):
        k = int(rng.integers(1, cfg.max_images_per_doc + 1))
        if rng.random() < cfg.bursty:
            pool = rng.integers(0, N_CLASSES, size=2)
            classes = pool[rng.integers(0, 2, size=k)]
        else:
            classes = rng.integers(0, N_CLASSES, size=k)
        docs.append([int(c) * cfg.n_per_class + int(rng.integers(0, cfg.n_per_class)) for c in classes])
    return docs


def _pack(docs, tok, m, pack_len):
    """Greedy packing into rows of items: ('t', id) text tokens or ('v', image_index)."""
    rows, row = [], []
    cap = pack_len
    for doc in docs:
        items = [("t", tok.bos_id)]
        for img in doc:
            items.append(("v", img))
            items += [("t", i) for i in tok.encode(QUERY_TEMPLATE)]
            items.append(("L", img))
            items.append(("t", tok.eoc_id))
        length = sum(m if kind == "v" else 1 for kind, _ in items)
        used = sum(m if kind == "v" else 1 for kind, _ in row)
        if row and used + length > cap:
            rows.append(row)
            row = []
        row.extend(items)
    if row:
        rows.append(row)
    return rows


def _batch_arrays(rows, labels_of, tok, m, pack_len):
    """Token ids, visual-slot index, target ids and loss mask for a batch of packed rows."""
    B = len(rows)
    ids = np.full((B, pack_len), tok.pad_id, dtype=np.int64)
    is_text = np.zeros((B, pack_len), dtype=bool)
    vis_slot = np.full((B, pack_len), -1, dtype=np.int64)
    images = []
    for b, row in enumerate(rows):
        p = 0
        for kind, val in row:
            if kind == "v":
                for r in range(m):
                    vis_slot[b, p + r] = len(images) * m + r
                images.append(val)
                p += m
            else:
                ids[b, p] = labels_of(val) if kind == "L" else val
                is_text[b, p] = True
                p += 1
    targets = np.full((B, pack_len), tok.pad_id, dtype=np.int64)
    targets[:, :-1] = ids[:, 1:]
    nxt_text = np.zeros_like(is_text)
    nxt_text[:, :-1] = is_text[:, 1:]
    mask = nxt_text & (targets != tok.pad_id) & (targets != tok.bos_id)
    return ids, is_text, vis_slot, images, targets, mask


def _sequence_embeddings(model, ids, is_text, vis_slot, vis_tokens):
    """Mix text embeddings and visual tokens into ``[B, L, d]``."""
    B, L = ids.shape
    d = model.d_model
    text = T.mul(model.text_embeddings(ids), T.Tensor(is_text[..., None].astype(np.float64)))
    flat = T.reshape(vis_tokens, (-1, d))
    flat = T.concat([flat, T.Tensor(np.zeros((1, d)))], axis=0)
    slot = np.where(vis_slot >= 0, vis_slot, flat.shape[0] - 1)
    vis = T.take(flat, slot)
    return T.add(text, vis)


def _scheduled_lr(oc, step, total_steps):
    lr = oc.lr
    if oc.warmup_steps:
        lr *= min(1.0, (step + 1) / oc.warmup_steps)
    if oc.schedule == "cosine" and total_steps > 0:
        lr *= 0.5 * (1.0 + np.cos(np.pi * min(step, total_steps) / total_steps))
    return lr


def pretrain(model, corpus_config=None, opt_config=None, samples=None, eval_docs=64):
    """Train VE, WE and LM jointly on packed interleaved image-caption documents.

    Returns ``model`` (still unfrozen) with ``model.meta['pretrain']`` holding
    the loss history and the final caption accuracy on training documents.
    """
    if model.frozen:
        raise FrozenError("cannot pretrain a frozen model")
    cc = corpus_config or CorpusConfig()
    oc = opt_config or OptConfig()
    t0 = time.time()
    if samples is None:
        samples = _corpus_images(cc)
    assert_in_dist(samples, "pretraining corpus")
    pixels = np.stack([s.pixels for s in samples])
    labels = np.array([s.label for s in samples])
    tok = model.tokenizer
    m = model.ve_cfg.n_tokens
    class_tok = np.array([tok.class_token(c) for c in range(N_CLASSES)])
    labels_of = lambda img: int(class_tok[labels[img]])  # noqa: E731
    rng = np.random.default_rng(derive_seed(STREAM_PRETRAIN, cc.seed, 0xD0C5))
    trainable = list(model.params.trainable().values())
    opt = make_optimizer(oc.optimizer, trainable, oc.lr, momentum=oc.momentum,
                         weight_decay=oc.weight_decay)
    history = []
    step = 0
    total_steps = None
    for epoch in range(oc.epochs):
        docs = _make_documents(cc, len(samples), rng)
        rows = _pack(docs, tok, m, cc.pack_len)
        order = rng.permutation(len(rows))
        if total_steps is None:      # row counts barely vary between epochs
            total_steps = oc.epochs * -(-len(rows) // oc.batch_size)
        epoch_loss = []
        for start in range(0, len(rows), oc.batch_size):
            batch_rows = [rows[i] for i in order[start:start + oc.batch_size]]
            ids, is_text, vis_slot, imgs, targets, mask = _batch_arrays(batch_rows, labels_of, tok, m, cc.pack_len)
            opt.lr = _scheduled_lr(oc, step, total_steps)
            opt.zero_grad()
            with T.Tape() as tape:
                vis = model.visual_tokens(pixels[imgs])
                emb = _sequence_embeddings(model, ids, is_text, vis_slot, vis)
                loss = T.cross_entropy(model.logits(emb), targets, mask)
            tape.backward(loss)
            clip_grad_norm(trainable, oc.grad_clip)
            opt.step()
            step += 1
            epoch_loss.append(loss.item())
        history.append(float(np.mean(epoch_loss)))
        logger.info("pretrain epoch %d loss %.4f (%.0fs)", epoch, history[-1], time.time() - t0)
    acc = caption_accuracy(model, samples, cc, n_docs=eval_docs) if oc.epochs else None
    model.meta["pretrain"] = {"loss": history, "caption_accuracy": acc,
                              "corpus": asdict(cc), "opt": asdict(oc),
                              "wall_s": round(time.time() - t0, 1)}
    return model


def caption_accuracy(model, samples, corpus_config, n_docs=64, seed=1):
    """Share of class-name positions where the full-vocabulary argmax is the right name."""
    tok = model.tokenizer
    m = model.ve_cfg.n_tokens
    labels = np.array([s.label for s in samples])
    pixels = np.stack([s.pixels for s in samples])
    class_tok = np.array([tok.class_token(c) for c in range(N_CLASSES)])
    rng = np.random.default_rng(derive_seed(STREAM_PRETRAIN, corpus_config.seed, 0xACC, seed))
    docs = _make_documents(corpus_config, len(samples), rng)[:n_docs]
    rows = _pack(docs, tok, m, corpus_config.pack_len)
    correct = total = 0
    class_set = set(class_tok.tolist())
    with T.no_grad():
        for start in range(0, len(rows), 16):
            ids, is_text, vis_slot, imgs, targets, mask = _batch_arrays(
                rows[start:start + 16], lambda i: int(class_tok[labels[i]]), tok, m, corpus_config.pack_len)
            emb = _sequence_embeddings(model, ids, is_text, vis_slot, model.visual_tokens(pixels[imgs]))
            pred = model.logits(emb).data.argmax(axis=-1)
            sel = mask & np.isin(targets, list(class_set))
            correct += int((pred[sel] == targets[sel]).sum())
            total += int(sel.sum())
    return correct / total if total else 0.0


# ---------------------------------------------------------------- checkpoints

def save(model, path):
    data = dumps(model)
    with open(path, "wb") as fh:
        fh.write(data)
    return path


def dumps(model):
    meta = {"config": config_dict(model.lm_cfg, model.ve_cfg), **{k: v for k, v in model.meta.items() if k != "config"}}
    tensors = {name: t.data for name, t in model.params.items()}
    return container.dumps(CHECKPOINT_MAGIC, tensors, seed=model.root_seed, frozen=model.frozen,
                           words=model.tokenizer.words, meta=meta)


def loads(buf, lm_cfg=None, ve_cfg=None):
    tensors, seed, frozen, words, meta = container.loads(buf, CHECKPOINT_MAGIC)
    cfg = meta.get("config", {})
    stored_lm = LMConfig(**cfg["lm"])
    stored_ve = VEConfig(**cfg["ve"])
    for given, stored, label in ((lm_cfg, stored_lm, "LM"), (ve_cfg, stored_ve, "VE")):
        if given is not None and asdict(given) != asdict(stored):
            diff = {k: (v, asdict(stored)[k]) for k, v in asdict(given).items() if asdict(stored)[k] != v}
            raise ConfigError(f"{label} config mismatch (given, stored): {diff}")
    params = ParamSet()
    for name, arr in tensors.items():
        params.add(name, T.Tensor(arr))
    model = VLModel(Tokenizer(words), stored_lm, stored_ve, params, root_seed=seed,
                    frozen=frozen, meta={k: v for k, v in meta.items() if k != "config"})
    return model


def load(path, lm_cfg=None, ve_cfg=None):
    with open(path, "rb") as fh:
        return loads(fh.read(), lm_cfg=lm_cfg, ve_cfg=ve_cfg)
