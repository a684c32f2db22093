"""Non-prompt baselines: nearest neighbours, zero-shot scoring, linear probes."""
from dataclasses import dataclass

import numpy as np
from sklearn.utils.validation import check_array, check_is_fitted

from ..exceptions import InputError
from ..vlm import QUERY_TEMPLATE
from ._common import (
    FrozenVLMClassifier,
    as_images,
    check_label_set,
    cosine_similarity,
    last_position_scores,
    mean_features,
    require_frozen,
    support_arrays,
    visual_tokens,
)


# ---------------------------------------------------------------- KNN

def knn_vote(sims, labels, k):
    """Majority label among the ``k`` most similar rows.

    Neighbours are ranked by similarity with ties to the lower index. Vote ties
    go to the class whose neighbours have the smaller mean cosine distance,
    then to the lower class id.
    """
    n = len(sims)
    if k < 1 or k > n:
        raise InputError(f"K={k} needs 1 <= K <= {n} support samples")
    order = np.lexsort((np.arange(n), -sims))[:k]
    best = None
    for c in np.unique(labels[order]):
        hit = order[labels[order] == c]
        key = (-len(hit), float(np.mean(1.0 - sims[hit])), int(c))
        if best is None or key < best:
            best = key
    return best[2]


class KNNClassifier(FrozenVLMClassifier):
    """Cosine K-nearest-neighbour vote over mean-pooled visual tokens."""

    def __init__(self, model=None, n_neighbors=8):
        self.model = model
        self.n_neighbors = n_neighbors

    def fit(self, X, y=None):
        require_frozen(self.model)
        pixels, labels = support_arrays(X, y)
        self.support_features_ = mean_features(self.model, pixels)
        self.support_labels_ = labels
        self.classes_ = np.unique(labels)
        return self

    def _select(self, labels):
        keep = np.isin(self.support_labels_, labels)
        if not keep.any():
            raise InputError("no support sample carries a label from label_set")
        return self.support_features_[keep], self.support_labels_[keep]

    def _scores(self, pixels, labels):
        """Vote share per label."""
        feats, lab = self._select(labels)
        sims = cosine_similarity(mean_features(self.model, pixels), feats)
        k = self.n_neighbors
        if k > len(lab):
            raise InputError(f"K={k} exceeds the {len(lab)} usable support samples")
        out = np.zeros((len(pixels), len(labels)))
        col = {int(c): j for j, c in enumerate(labels)}
        for i, row in enumerate(sims):
            for c in lab[np.lexsort((np.arange(len(row)), -row))[:k]]:
                out[i, col[int(c)]] += 1.0 / k
        return out

    def predict(self, X, label_set=None):
        labels = self._label_set(label_set)
        feats, lab = self._select(labels)
        sims = cosine_similarity(mean_features(self.model, as_images(X)), feats)
        return np.array([knn_vote(row, lab, self.n_neighbors) for row in sims])


def knn_classify(support, model, image, K=8):
    if not len(support):
        raise InputError("empty support set")
    clf = KNNClassifier(model, n_neighbors=K).fit(support)
    return int(clf.predict(np.asarray(image)[None])[0])


# ---------------------------------------------------------------- zero-shot

def template_embeddings(model, vis, query=QUERY_TEMPLATE):
    """``<bos> V(x) this is a`` as a ``[B, T, d]`` array."""
    wte = model.params["we.wte"].data
    tok = model.tokenizer
    B = len(vis)
    head = np.broadcast_to(wte[[tok.bos_id]], (B, 1, wte.shape[1]))
    tail = np.broadcast_to(wte[tok.encode(query)], (B, len(query), wte.shape[1]))
    return np.concatenate([head, vis, tail], axis=1)


class ZeroShotClassifier(FrozenVLMClassifier):
    """Label likelihood after the manual template, no adaptation at all.

    ``fit`` only records which classes to score by default.
    """

    def __init__(self, model=None):
        self.model = model

    def fit(self, X=None, y=None):
        require_frozen(self.model)
        if y is None and X is not None:
            _, y = support_arrays(X)
        if y is None:
            raise InputError("zero-shot fit needs labels to fix the default label set")
        self.classes_ = check_label_set(y)
        return self

    def _scores(self, pixels, labels):
        out = []
        for i in range(0, len(pixels), 64):
            vis = visual_tokens(self.model, pixels[i:i + 64])
            out.append(last_position_scores(self.model, template_embeddings(self.model, vis), labels))
        return np.concatenate(out)


def zero_shot_classify(model, image, label_set):
    require_frozen(model)
    return model.classify([], image, [model.query_segment()], label_set)


# ---------------------------------------------------------------- linear probe

@dataclass
class ProbeConfig:
    lr: float = 0.5
    max_iter: int = 2000
    tol: float = 1e-6
    alpha: float = 1e-4

    def __post_init__(self):
        if self.lr <= 0 or self.max_iter < 0 or self.tol < 0 or self.alpha < 0:
            raise InputError("probe lr must be positive and max_iter, tol, alpha non-negative")


def fit_softmax_regression(F, y, classes, config=None):
    """Multinomial logistic regression by full-batch gradient descent from zeros.

    Stops when the largest gradient entry drops below ``tol``. Returns
    ``(W, b, n_iter)``.
    """
    cfg = config or ProbeConfig()
    index = {int(c): j for j, c in enumerate(classes)}
    missing = [int(c) for c in classes if int(c) not in set(y.tolist())]
    if missing:
        raise InputError(f"classes without training samples: {missing}")
    N, d = F.shape
    Y = np.zeros((N, len(classes)))
    Y[np.arange(N), [index[int(c)] for c in y]] = 1.0
    W = np.zeros((d, len(classes)))
    b = np.zeros(len(classes))
    n_iter = 0
    for n_iter in range(1, cfg.max_iter + 1):
        Z = F @ W + b
        Z -= Z.max(axis=1, keepdims=True)
        P = np.exp(Z)
        P /= P.sum(axis=1, keepdims=True)
        G = (P - Y) / N
        gW = F.T @ G + cfg.alpha * W
        gb = G.sum(axis=0)
        W -= cfg.lr * gW
        b -= cfg.lr * gb
        if max(np.abs(gW).max(), np.abs(gb).max()) < cfg.tol:
            break
    else:
        n_iter = cfg.max_iter
    return W, b, n_iter


class LinearProbe(FrozenVLMClassifier):
    """Softmax regression on standardised mean-pooled visual tokens.

    With ``model=None`` the inputs are taken to be feature rows already.
    """

    def __init__(self, model=None, lr=0.5, max_iter=2000, tol=1e-6, alpha=1e-4):
        self.model = model
        self.lr = lr
        self.max_iter = max_iter
        self.tol = tol
        self.alpha = alpha

    def _features(self, X):
        if self.model is None:
            return check_array(X, dtype=np.float64, input_name="X")
        return mean_features(self.model, as_images(X))

    def fit(self, X, y=None, classes=None):
        if self.model is not None:
            require_frozen(self.model)
            pixels, y = support_arrays(X, y)
            F = mean_features(self.model, pixels)
        else:
            if y is None:
                raise InputError("labels are required for feature input")
            F = check_array(X, dtype=np.float64, input_name="X")
            y = np.asarray(y, dtype=np.int64)
        self.classes_ = check_label_set(y if classes is None else classes)
        self.mean_ = F.mean(axis=0)
        scale = F.std(axis=0)
        self.scale_ = np.where(scale > 0, scale, 1.0)
        cfg = ProbeConfig(self.lr, self.max_iter, self.tol, self.alpha)
        self.coef_, self.intercept_, self.n_iter_ = fit_softmax_regression(
            (F - self.mean_) / self.scale_, y, self.classes_, cfg)
        return self

    def decision_function(self, X, label_set=None):
        check_is_fitted(self, "coef_")
        cols = self._columns(label_set)
        Z = ((self._features(X) - self.mean_) / self.scale_) @ self.coef_ + self.intercept_
        return Z[:, cols]

    def _columns(self, label_set):
        if label_set is None:
            return np.arange(len(self.classes_))
        labels = check_label_set(label_set)
        unknown = sorted(set(labels.tolist()) - set(self.classes_.tolist()))
        if unknown:
            raise InputError(f"probe was not trained on classes {unknown}")
        return np.searchsorted(self.classes_, labels)

    def predict(self, X, label_set=None):
        labels = self.classes_ if label_set is None else check_label_set(label_set)
        return labels[np.argmax(self.decision_function(X, label_set), axis=1)]

    def score(self, X, y=None, label_set=None):
        if self.model is not None:
            return super().score(X, y, label_set)
        y = np.asarray(y)
        return float(np.count_nonzero(self.predict(X, label_set) == y)) / len(y)


def linear_probe_train(model, samples, labels, config=None, classes=None):
    """Fit a probe on frozen features; returns ``(W, b)`` in standardised feature space."""
    cfg = config or ProbeConfig()
    probe = LinearProbe(model, cfg.lr, cfg.max_iter, cfg.tol, cfg.alpha).fit(samples, labels, classes)
    return probe.coef_, probe.intercept_
