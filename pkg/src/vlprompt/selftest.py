"""Quick gradient and oracle checks runnable from the command line."""
import time

import numpy as np

from . import tensor as T
from .adapt import init_prompt
from .adapt._common import at_scale
from .adapt.baselines import knn_vote
from .adapt.icl import rice_indices
from .adapt.prompts import _Prompt
from .nn import LMConfig, VEConfig
from .synth import N_CLASSES
from .vlm import CorpusConfig, Tokenizer, VLModel, _batch_arrays, _make_documents, _pack, _sequence_embeddings

GRAD_TOL = 1e-4


def _t(rng, *shape, scale=1.0):
    return T.Tensor(rng.normal(size=shape) * scale, requires_grad=True)


def primitive_cases(seed=0):
    """(name, loss function, params) for every differentiable primitive."""
    rng = np.random.default_rng(seed)
    a, b = _t(rng, 2, 3, 4), _t(rng, 2, 3, 4)
    m1, m2 = _t(rng, 2, 3, 4), _t(rng, 4, 5)
    x, g, bb = _t(rng, 3, 6), _t(rng, 6), _t(rng, 6)
    tab = _t(rng, 7, 4)
    img, k, kb = _t(rng, 2, 2, 7, 7), _t(rng, 3, 2, 3, 3), _t(rng, 3)
    pool_in = _t(rng, 1, 2, 5, 7)
    lg = _t(rng, 4, 6)
    targets = rng.integers(0, 6, size=4)

    weights = {}

    def wsum(t):
        # fixed random weighting so every output entry matters
        if t.shape not in weights:
            weights[t.shape] = np.random.default_rng(len(weights) + 99).normal(size=t.shape)
        return T.sum_all(T.mul(t, T.Tensor(weights[t.shape])))

    return [
        ("add", lambda: wsum(T.add(a, b)), [a, b]),
        ("sub", lambda: wsum(T.sub(a, b)), [a, b]),
        ("mul", lambda: wsum(T.mul(a, b)), [a, b]),
        ("scale", lambda: wsum(T.scale(a, -1.7)), [a]),
        ("gelu", lambda: wsum(T.gelu(a)), [a]),
        ("matmul", lambda: wsum(T.matmul(m1, m2)), [m1, m2]),
        ("transpose", lambda: wsum(T.transpose(a, (2, 0, 1))), [a]),
        ("reshape", lambda: wsum(T.reshape(a, (6, 4))), [a]),
        ("softmax_rows", lambda: wsum(T.softmax_rows(a)), [a]),
        ("log_softmax_rows", lambda: wsum(T.log_softmax_rows(a)), [a]),
        ("layer_norm", lambda: wsum(T.layer_norm(x, g, bb)), [x, g, bb]),
        ("cross_entropy", lambda: T.cross_entropy(lg, targets, [True, False, True, True]), [lg]),
        ("mean_rows", lambda: wsum(T.mean_rows(x)), [x]),
        ("embedding_lookup", lambda: wsum(T.embedding_lookup(tab, np.array([[0, 3], [3, 6]]))), [tab]),
        ("concat_rows", lambda: wsum(T.concat_rows([a, b])), [a, b]),
        ("conv2d", lambda: wsum(T.conv2d(img, k, kb, stride=2, padding=1)), [img, k, kb]),
        ("adaptive_avg_pool2d", lambda: wsum(T.adaptive_avg_pool2d(pool_in, (2, 3))), [pool_in]),
        ("take", lambda: wsum(T.take(a, (slice(None), [0, 2, 2]))), [a]),
        ("expand", lambda: wsum(T.expand(x, 2)), [x]),
    ]


def tiny_model(seed=0):
    tok = Tokenizer()
    lm = LMConfig(vocab_size=len(tok), d_model=8, n_layers=1, n_heads=2, max_seq_len=64)
    ve = VEConfig(d_model=8, channels=[2, 3], kernel=3)
    model = VLModel.create(seed, lm, ve, tok)
    rng = np.random.default_rng(seed + 1)
    for _, t in model.params.items():         # move off the symmetric init so every path carries signal
        t.data = t.data + rng.normal(scale=0.5, size=t.shape)
    return model


def pretrain_loss_case(seed=0):
    model = tiny_model(seed)
    rng = np.random.default_rng(seed)
    pixels = rng.uniform(size=(N_CLASSES, 8, 8, 3))        # one image per class
    labels = np.arange(N_CLASSES)
    cc = CorpusConfig(n_per_class=1, max_images_per_doc=2, pack_len=40)
    docs = _make_documents(cc, N_CLASSES, np.random.default_rng(seed))[:1]
    rows = _pack(docs, model.tokenizer, model.ve_cfg.n_tokens, cc.pack_len)[:1]
    tok = model.tokenizer
    ids, is_text, slot, imgs, targets, mask = _batch_arrays(
        rows, lambda i: tok.class_token(int(labels[i])), tok, model.ve_cfg.n_tokens, cc.pack_len)

    def loss():
        vis = model.visual_tokens(pixels[imgs])
        return T.cross_entropy(model.logits(_sequence_embeddings(model, ids, is_text, slot, vis)), targets, mask)

    return loss, [t for _, t in model.params.items()]


def prompt_loss_case(variant, seed=0):
    """Loss of a soft prompt through a frozen tiny model; parameters are the soft tokens."""
    model = tiny_model(seed).freeze()
    rng = np.random.default_rng(seed)
    params = init_prompt(variant, model.d_model, n_context=4, n_query=2, seed=seed)
    prompt = _Prompt(model, params, trainable=True)
    pixels = rng.uniform(size=(2, 32, 32, 3))
    vis = [model.visual_tokens(at_scale(pixels, s)).data for s in params.scales]
    targets = [model.tokenizer.class_token(3), model.tokenizer.class_token(11)]

    def loss():
        return T.cross_entropy(prompt.last_logits(vis), targets)

    return loss, prompt.learnable()


def check(f, tensors):
    """grad_check for a closure over ``tensors``."""
    return T.grad_check(lambda _: f(), {str(i): t for i, t in enumerate(tensors)})


def gradient_suite(seed=0):
    """``{name: max relative error}`` for every primitive and composed loss."""
    results = {}
    for name, f, params in primitive_cases(seed):
        results[name] = check(f, params)
    f, params = pretrain_loss_case(seed)
    results["vlm_pretrain_loss"] = check(f, params)
    for variant in ("prol", "robust"):
        f, params = prompt_loss_case(variant, seed)
        results[f"{variant}_soft_tokens"] = check(f, params)
    return results


def _knn_reference(sims, labels, k):
    ranked = sorted(range(len(sims)), key=lambda i: (-sims[i], i))[:k]
    votes = {}
    for i in ranked:
        votes.setdefault(int(labels[i]), []).append(1.0 - sims[i])
    return min(votes, key=lambda c: (-len(votes[c]), sum(votes[c]) / len(votes[c]), c))


def oracle_suite(n_cases=100, seed=0):
    """Randomised comparison of KNN votes and RICE retrieval against sort-based references."""
    rng = np.random.default_rng(seed)
    fails = {"knn": 0, "rice": 0}
    for _ in range(n_cases):
        n = int(rng.integers(8, 41))
        sims = np.round(rng.uniform(-1, 1, size=n), int(rng.integers(1, 4)))      # coarse values force ties
        labels = rng.integers(0, 6, size=n)
        k = int(rng.integers(1, min(n, 8) + 1))
        if knn_vote(sims, labels, k) != _knn_reference(sims, labels, k):
            fails["knn"] += 1
        ref = sorted(range(n), key=lambda i: (-sims[i], i))[:k][::-1]
        if list(rice_indices(sims, k)) != ref:
            fails["rice"] += 1
    return fails


def main(out=print):
    t0 = time.time()
    grads = gradient_suite()
    worst = max(grads.values())
    for name, err in sorted(grads.items()):
        out(f"grad {name:24s} {err:.2e} {'ok' if err <= GRAD_TOL else 'FAIL'}")
    fails = oracle_suite()
    for name, n in fails.items():
        out(f"oracle {name:22s} {n} mismatches in 100 cases {'ok' if n == 0 else 'FAIL'}")
    ok = worst <= GRAD_TOL and not any(fails.values())
    out(f"selftest {'passed' if ok else 'FAILED'} in {time.time() - t0:.1f}s")
    return 0 if ok else 1
