"""Classifiers consuming feature tables: k-NN, logistic regression, linear SVM.

k-NN is also the fitness engine for wrapper feature selection; its
tie-breaking is pinned (distance ties -> lower training-row index, vote
ties -> lower class index) so results are reproducible.  Logistic
regression minimizes mean cross-entropy plus an L2 penalty by full-batch
gradient descent with Armijo backtracking; the linear SVM minimizes
one-vs-rest hinge loss with an L2 term by subgradient descent with the
1/(lambda*t) step schedule.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils import check_array

from .errors import DimensionError, DomainError, FormatError
from .numerics import softmax

_MAGIC = b"ATFC"
_VERSION = 1


def _check_features(X) -> np.ndarray:
    return check_array(X, dtype=np.float64, ensure_2d=True)


# ---------------------------------------------------------------------------
# k-nearest neighbors


def knn_predict(
    train_features: np.ndarray,
    train_labels: np.ndarray,
    queries: np.ndarray,
    k: int,
    num_classes: int | None = None,
) -> np.ndarray:
    train_features = np.asarray(train_features, dtype=np.float64)
    train_labels = np.asarray(train_labels, dtype=np.int64)
    queries = np.asarray(queries, dtype=np.float64)
    n = train_features.shape[0]
    if k < 1 or k > n:
        raise DomainError(f"k={k} outside [1, {n}] for {n} training rows")
    if queries.shape[1] != train_features.shape[1]:
        raise DimensionError(
            f"query dim {queries.shape[1]} != training dim {train_features.shape[1]}"
        )
    if num_classes is None:
        num_classes = int(train_labels.max()) + 1

    # squared distances preserve ordering; stable sort pins distance ties
    d2 = (
        np.sum(queries**2, axis=1)[:, None]
        - 2.0 * queries @ train_features.T
        + np.sum(train_features**2, axis=1)[None, :]
    )
    nearest = np.argsort(d2, axis=1, kind="stable")[:, :k]
    preds = np.empty(queries.shape[0], dtype=np.int64)
    for i, rows in enumerate(nearest):
        votes = np.bincount(train_labels[rows], minlength=num_classes)
        preds[i] = int(np.argmax(votes))  # argmax takes the lowest tied class
    return preds


class KnnClassifier(BaseEstimator, ClassifierMixin):
    def __init__(self, k=5):
        self.k = k

    def fit(self, X, y):
        X = _check_features(X)
        y = np.asarray(y, dtype=np.int64)
        if self.k > X.shape[0]:
            raise DomainError(f"k={self.k} exceeds {X.shape[0]} training rows")
        self.train_features_ = X
        self.train_labels_ = y
        self.classes_ = np.arange(int(y.max()) + 1 if len(y) else 0)
        return self

    def predict(self, X):
        if not hasattr(self, "train_features_"):
            raise NotFittedError("fit the classifier first")
        return knn_predict(
            self.train_features_, self.train_labels_, _check_features(X),
            self.k, len(self.classes_),
        )


# ---------------------------------------------------------------------------
# multinomial logistic regression


def _logreg_loss_grad(weights, bias, X, y, l2):
    n = X.shape[0]
    logits = X @ weights.T + bias
    probs = softmax(logits, axis=1)
    picked = np.clip(probs[np.arange(n), y], 1e-12, None)
    loss = float(-np.mean(np.log(picked)) + 0.5 * l2 * np.sum(weights**2))
    dlogits = probs.copy()
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    grad_w = dlogits.T @ X + l2 * weights
    grad_b = dlogits.sum(axis=0)
    return loss, grad_w, grad_b


class LogisticRegressionGD(BaseEstimator, ClassifierMixin):
    """Softmax regression trained by gradient descent with line search.

    Stops when the full-gradient L2 norm drops below ``tol`` or after
    ``max_iters`` accepted steps; the loss never increases across accepted
    steps by the Armijo condition.
    """

    def __init__(self, l2=1.0, max_iters=1000, tol=1e-6):
        self.l2 = l2
        self.max_iters = max_iters
        self.tol = tol

    def fit(self, X, y):
        X = _check_features(X)
        y = np.asarray(y, dtype=np.int64)
        if X.shape[0] == 0:
            raise DomainError("cannot fit logistic regression on an empty table")
        num_classes = int(y.max()) + 1
        d = X.shape[1]
        weights = np.zeros((num_classes, d))
        bias = np.zeros(num_classes)

        step = 1.0
        loss, grad_w, grad_b = _logreg_loss_grad(weights, bias, X, y, self.l2)
        for it in range(self.max_iters):
            grad_norm = float(np.sqrt(np.sum(grad_w**2) + np.sum(grad_b**2)))
            if grad_norm < self.tol:
                break
            g2 = grad_norm**2
            step = min(step * 2.0, 1e6)
            for _ in range(80):
                new_w = weights - step * grad_w
                new_b = bias - step * grad_b
                new_loss, new_gw, new_gb = _logreg_loss_grad(new_w, new_b, X, y, self.l2)
                if new_loss <= loss - 1e-4 * step * g2:
                    break
                step *= 0.5
            weights, bias = new_w, new_b
            loss, grad_w, grad_b = new_loss, new_gw, new_gb
        self.coef_ = weights
        self.intercept_ = bias
        self.final_grad_norm_ = float(np.sqrt(np.sum(grad_w**2) + np.sum(grad_b**2)))
        self.classes_ = np.arange(num_classes)
        return self

    def predict_proba(self, X):
        if not hasattr(self, "coef_"):
            raise NotFittedError("fit the classifier first")
        X = _check_features(X)
        return softmax(X @ self.coef_.T + self.intercept_, axis=1)

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)


# ---------------------------------------------------------------------------
# linear SVM (one-vs-rest)


class LinearSvm(BaseEstimator, ClassifierMixin):
    """L2-regularized hinge loss per class, deterministic full-batch subgradient.

    lambda = 1 / (C * n); step at iteration t is 1 / (lambda * t).  The bias
    is trained as an augmented constant feature.
    """

    def __init__(self, C=1.0, steps=1000):
        self.C = C
        self.steps = steps

    def fit(self, X, y):
        X = _check_features(X)
        y = np.asarray(y, dtype=np.int64)
        num_classes = int(y.max()) + 1
        if num_classes < 2:
            raise DomainError("linear SVM needs at least two classes")
        n, d = X.shape
        lam = 1.0 / (self.C * n)
        Xa = np.hstack([X, np.ones((n, 1))])

        weights = np.zeros((num_classes, d + 1))
        for c in range(num_classes):
            target = np.where(y == c, 1.0, -1.0)
            w = np.zeros(d + 1)
            for t in range(1, self.steps + 1):
                margin = target * (Xa @ w)
                violators = margin < 1.0
                sub = lam * w - (target[violators] @ Xa[violators]) / n
                w = w - sub / (lam * t)
            weights[c] = w
        self.coef_ = weights[:, :d]
        self.intercept_ = weights[:, d]
        self.classes_ = np.arange(num_classes)
        return self

    def decision_function(self, X):
        if not hasattr(self, "coef_"):
            raise NotFittedError("fit the classifier first")
        X = _check_features(X)
        return X @ self.coef_.T + self.intercept_

    def predict(self, X):
        return np.argmax(self.decision_function(X), axis=1)


# ---------------------------------------------------------------------------
# serialization (container with a classifier-type tag)


def save_classifier(model, path: str | Path) -> None:
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<B", _VERSION))

    def write_tag(tag: str):
        raw = tag.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)

    def write_array(arr):
        arr = np.asarray(arr)
        buf.write(struct.pack("<B", arr.ndim))
        for s in arr.shape:
            buf.write(struct.pack("<Q", s))
        buf.write(arr.astype("<f8").tobytes())

    if isinstance(model, KnnClassifier):
        write_tag("knn")
        buf.write(struct.pack("<II", model.k, len(model.classes_)))
        write_array(model.train_features_)
        write_array(model.train_labels_)
    elif isinstance(model, LogisticRegressionGD):
        write_tag("logreg")
        buf.write(struct.pack("<dIId", model.l2, model.max_iters, 0, model.tol))
        write_array(model.coef_)
        write_array(model.intercept_)
    elif isinstance(model, LinearSvm):
        write_tag("svm")
        buf.write(struct.pack("<dI", model.C, model.steps))
        write_array(model.coef_)
        write_array(model.intercept_)
    else:
        raise DomainError(f"cannot serialize classifier of type {type(model).__name__}")
    Path(path).write_bytes(buf.getvalue())


def load_classifier(path: str | Path):
    raw = Path(path).read_bytes()
    buf = io.BytesIO(raw)

    def read(n: int) -> bytes:
        chunk = buf.read(n)
        if len(chunk) != n:
            raise FormatError(f"{path}: truncated classifier file")
        return chunk

    def read_array():
        (ndim,) = struct.unpack("<B", read(1))
        shape = tuple(struct.unpack("<Q", read(8))[0] for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        return np.frombuffer(read(8 * count), dtype="<f8").reshape(shape).copy()

    if read(4) != _MAGIC:
        raise FormatError(f"{path}: not a classifier file (bad magic)")
    (version,) = struct.unpack("<B", read(1))
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported classifier version {version}")
    (tag_len,) = struct.unpack("<H", read(2))
    tag = read(tag_len).decode("utf-8")

    if tag == "knn":
        k, n_classes = struct.unpack("<II", read(8))
        model = KnnClassifier(k=k)
        model.train_features_ = read_array()
        model.train_labels_ = read_array().astype(np.int64)
        model.classes_ = np.arange(n_classes)
    elif tag == "logreg":
        l2, max_iters, _, tol = struct.unpack("<dIId", read(24))
        model = LogisticRegressionGD(l2=l2, max_iters=max_iters, tol=tol)
        model.coef_ = read_array()
        model.intercept_ = read_array()
        model.classes_ = np.arange(model.coef_.shape[0])
    elif tag == "svm":
        C, steps = struct.unpack("<dI", read(12))
        model = LinearSvm(C=C, steps=steps)
        model.coef_ = read_array()
        model.intercept_ = read_array()
        model.classes_ = np.arange(model.coef_.shape[0])
    else:
        raise FormatError(f"{path}: unknown classifier tag {tag!r}")
    return model


def make_classifier(kind: str, **kwargs):
    kinds = {"knn": KnnClassifier, "logreg": LogisticRegressionGD, "svm": LinearSvm}
    if kind not in kinds:
        raise DomainError(f"unknown classifier {kind!r}; choose from {sorted(kinds)}")
    return kinds[kind](**kwargs)
