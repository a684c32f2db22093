"""In-context classification with random or retrieved demonstrations."""
import numpy as np

from ..exceptions import ConfigError, InputError
from ..rng import derive_seed
from ..synth import CLASS_NAMES
from ..vlm import QUERY_TEMPLATE, TextSeg, VisualSeg
from ._common import (
    FrozenVLMClassifier,
    as_images,
    cosine_similarity,
    last_position_scores,
    mean_features,
    require_frozen,
    support_arrays,
    visual_tokens,
)

STREAM_ICL = 0x1C1


def demo_words(class_name):
    return list(QUERY_TEMPLATE) + [class_name, "<eoc>"]


def random_indices(n_support, k, seed, query_index=0):
    """``k`` support indices drawn without replacement, in draw order."""
    if k > n_support:
        raise InputError(f"K={k} demonstrations requested from {n_support} support samples")
    rng = np.random.default_rng(derive_seed(STREAM_ICL, seed, query_index))
    return rng.choice(n_support, size=k, replace=False)


def rice_indices(sims, k, order="ascending"):
    """Top-``k`` support indices by cosine, ties to the lower index.

    ``ascending`` lists the least similar first, which puts the closest
    demonstration right before the query.
    """
    n = len(sims)
    if k > n:
        raise InputError(f"K={k} demonstrations requested from {n} support samples")
    top = np.lexsort((np.arange(n), -sims))[:k]
    if order == "ascending":
        return top[::-1]
    if order == "descending":
        return top
    raise ConfigError(f"unknown demonstration order {order!r}")


def demo_segments(model, pixels, labels, indices):
    """``[V(x) this is a <name> <eoc>]`` for each index, as prompt segments."""
    vis = visual_tokens(model, pixels[np.asarray(indices)])
    segs = []
    for v, i in zip(vis, indices):
        segs += [VisualSeg(v), TextSeg(model.tokenizer.encode(demo_words(CLASS_NAMES[int(labels[i])])))]
    return segs


def icl_random(support, model, K=8, seed=0):
    require_frozen(model)
    pixels, labels = support_arrays(support)
    return demo_segments(model, pixels, labels, random_indices(len(pixels), K, seed))


def icl_rice(support, model, image, K=8, order="ascending"):
    require_frozen(model)
    pixels, labels = support_arrays(support)
    sims = cosine_similarity(mean_features(model, np.asarray(image)[None]), mean_features(model, pixels))[0]
    return demo_segments(model, pixels, labels, rice_indices(sims, K, order))


class InContextClassifier(FrozenVLMClassifier):
    """Few-shot classification by conditioning the frozen VLM on demonstrations.

    ``selection="random"`` draws fresh demonstrations for every test image
    (seeded by the image's position); ``"rice"`` retrieves the most similar
    support images.
    """

    def __init__(self, model=None, selection="rice", n_shots=8, order="ascending", seed=0):
        self.model = model
        self.selection = selection
        self.n_shots = n_shots
        self.order = order
        self.seed = seed

    def fit(self, X, y=None):
        require_frozen(self.model)
        if self.selection not in ("random", "rice"):
            raise ConfigError(f"unknown selection {self.selection!r}")
        pixels, labels = support_arrays(X, y)
        if self.n_shots > len(pixels):
            raise InputError(f"K={self.n_shots} demonstrations requested from {len(pixels)} support samples")
        self.support_tokens_ = visual_tokens(self.model, pixels)
        self.support_features_ = self.support_tokens_.mean(axis=1)
        self.support_labels_ = labels
        self.classes_ = np.unique(labels)
        tok = self.model.tokenizer
        wte = self.model.params["we.wte"].data
        self._demo_text = {int(c): wte[tok.encode(demo_words(CLASS_NAMES[int(c)]))]
                           for c in self.classes_}
        return self

    def demonstrations(self, X, start=0):
        """Support indices per test image, in prompt order."""
        pixels = as_images(X)
        if self.selection == "random":
            n = len(self.support_labels_)
            return np.stack([random_indices(n, self.n_shots, self.seed, start + i) for i in range(len(pixels))])
        sims = cosine_similarity(mean_features(self.model, pixels), self.support_features_)
        return np.stack([rice_indices(row, self.n_shots, self.order) for row in sims])

    def _embeddings(self, query_tokens, demos):
        tok = self.model.tokenizer
        wte = self.model.params["we.wte"].data
        rows = []
        for q, idx in zip(query_tokens, demos):
            parts = [wte[[tok.bos_id]]]
            for i in idx:
                parts += [self.support_tokens_[i], self._demo_text[int(self.support_labels_[i])]]
            parts += [q, wte[tok.encode(QUERY_TEMPLATE)]]
            rows.append(np.concatenate(parts))
        return np.stack(rows)

    def _scores(self, pixels, labels):
        out = []
        for s in range(0, len(pixels), 32):
            chunk = pixels[s:s + 32]
            demos = self.demonstrations(chunk, start=s)
            emb = self._embeddings(visual_tokens(self.model, chunk), demos)
            out.append(last_position_scores(self.model, emb, labels))
        return np.concatenate(out)
