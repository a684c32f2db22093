"""Input checks, frozen-feature extraction and batched label scoring."""
import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, column_or_1d

from .. import tensor as T
from ..exceptions import FrozenError, InputError
from ..synth import N_CLASSES, PRETRAIN_SCALE, ImageSample, SupportSet, resize

BATCH = 64


def as_images(X):
    """Pixels ``[N, H, W, 3]`` from an array, a list of samples or a support set."""
    if isinstance(X, SupportSet):
        X = X.samples
    if isinstance(X, (list, tuple)) and X and isinstance(X[0], ImageSample):
        X = np.stack([s.pixels for s in X])
    arr = check_array(X, allow_nd=True, ensure_min_samples=1, ensure_all_finite=True,
                      dtype=np.float64, input_name="X")
    if arr.ndim != 4 or arr.shape[-1] != 3 or arr.shape[1] != arr.shape[2]:
        raise InputError(f"expected square RGB images shaped [N, H, W, 3], got {arr.shape}")
    return arr


def as_labels(y, n):
    y = column_or_1d(y, warn=False)
    if y.shape[0] != n:
        raise InputError(f"{n} images but {y.shape[0]} labels")
    if not np.all(np.equal(np.mod(y, 1), 0)):
        raise InputError("labels must be integer class ids")
    y = y.astype(np.int64)
    if y.min() < 0 or y.max() >= N_CLASSES:
        raise InputError(f"labels must lie in [0, {N_CLASSES})")
    return y


def support_arrays(X, y=None):
    """``(pixels, labels)`` from ``(X, y)`` or from labelled samples when ``y`` is None."""
    if y is None:
        samples = X.samples if isinstance(X, SupportSet) else X
        if not samples or not isinstance(samples[0], ImageSample):
            raise InputError("labels are required unless X holds labelled samples")
        y = [s.label for s in samples]
    pixels = as_images(X)
    return pixels, as_labels(y, len(pixels))


def check_label_set(label_set):
    labels = sorted(set(int(c) for c in np.atleast_1d(label_set)))
    if not labels:
        raise InputError("label_set is empty")
    if labels[0] < 0 or labels[-1] >= N_CLASSES:
        raise InputError(f"label_set must lie in [0, {N_CLASSES})")
    return np.array(labels, dtype=np.int64)


def require_frozen(model):
    if not getattr(model, "frozen", False):
        raise FrozenError("adaptation needs a frozen model")


def at_scale(pixels, side):
    if pixels.shape[1] == side:
        return pixels
    return np.stack([resize(p, side) for p in pixels])


def visual_tokens(model, pixels, side=PRETRAIN_SCALE, batch_size=BATCH):
    """Frozen visual tokens ``[N, m, d]`` with images resampled to ``side``."""
    pixels = at_scale(pixels, side)
    out = []
    with T.no_grad():
        for i in range(0, len(pixels), batch_size):
            out.append(model.visual_tokens(pixels[i:i + batch_size]).data)
    return np.concatenate(out)


def mean_features(model, pixels, batch_size=BATCH):
    """Mean of the visual tokens at the pretraining scale, ``[N, d]``."""
    return visual_tokens(model, pixels, PRETRAIN_SCALE, batch_size).mean(axis=1)


def cosine_similarity(a, b):
    """Row-wise cosine between ``a [N, d]`` and ``b [M, d]``; zero vectors score 0."""
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    a = np.divide(a, na, out=np.zeros_like(a), where=na > 0)
    b = np.divide(b, nb, out=np.zeros_like(b), where=nb > 0)
    return a @ b.T


def label_token_ids(model, labels):
    return np.array([model.tokenizer.class_token(int(c)) for c in labels])


def last_position_scores(model, emb, labels):
    """Log P(label | prompt) for single-token labels; ``emb`` is a ``[B, T, d]`` array."""
    with T.no_grad():
        return model.label_scores(T.Tensor(emb), [int(c) for c in labels])


class FrozenVLMClassifier(ClassifierMixin, BaseEstimator):
    """Shared ``predict``/``decision_function`` for methods that score a label set.

    Subclasses implement ``_scores(pixels, labels) -> [N, L]`` and set
    ``classes_`` during ``fit``. ``label_set`` defaults to the fitted classes.
    """

    def _label_set(self, label_set):
        check_is_fitted(self, "classes_")
        return self.classes_ if label_set is None else check_label_set(label_set)

    def decision_function(self, X, label_set=None):
        labels = self._label_set(label_set)
        return self._scores(as_images(X), labels)

    def predict(self, X, label_set=None):
        labels = self._label_set(label_set)
        if len(labels) == 1:
            return np.full(len(as_images(X)), labels[0])
        scores = self._scores(as_images(X), labels)
        return labels[np.argmax(scores, axis=1)]

    def score(self, X, y=None, label_set=None):
        pixels, y = support_arrays(X, y)
        return float(np.count_nonzero(self.predict(pixels, label_set) == y)) / len(y)
