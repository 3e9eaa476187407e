"""Mini-batch training with the Nadam optimizer.

The update rule blends the bias-corrected first moment with the
bias-corrected current gradient (Nesterov-style lookahead):

    m <- b1*m + (1-b1)*g        v <- b2*v + (1-b2)*g^2
    step = lr * (b1 * m/(1-b1^(t+1)) + (1-b1) * g/(1-b1^t))
               / (sqrt(v/(1-b2^t)) + eps)          with t = 1, 2, ...

Batch gradients are the mean of per-sample gradients, accumulated in a
fixed order so runs are bit-reproducible under a seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .data import ImageSample
from .errors import DimensionError, DomainError, NumericFailure
from .metrics import ConfusionMatrix, confusion
from .model import (
    ModelConfig,
    ModelParams,
    backward,
    cross_entropy,
    extract_features,
    forward,
    init_params,
    zero_gradients,
)
from .rng import Rng, derive_seed


@dataclass
class NadamConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise DomainError("beta1 and beta2 must lie in [0, 1)")
        if self.learning_rate < 0.0:
            raise DomainError("learning rate must be non-negative")


@dataclass
class NadamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def like(cls, param: np.ndarray) -> "NadamState":
        return cls(m=np.zeros_like(param), v=np.zeros_like(param))


def nadam_step(
    param: np.ndarray, grad: np.ndarray, state: NadamState, cfg: NadamConfig
) -> np.ndarray:
    """One Nadam update; advances ``state`` and returns the new parameter."""
    if param.shape != grad.shape or param.shape != state.m.shape:
        raise DimensionError(
            f"parameter {param.shape}, gradient {grad.shape}, and state "
            f"{state.m.shape} shapes disagree"
        )
    state.t += 1
    t = state.t
    b1, b2 = cfg.beta1, cfg.beta2
    state.m = b1 * state.m + (1.0 - b1) * grad
    state.v = b2 * state.v + (1.0 - b2) * grad * grad
    m_hat = state.m / (1.0 - b1 ** (t + 1))
    g_hat = grad / (1.0 - b1**t)
    v_hat = state.v / (1.0 - b2**t)
    step = cfg.learning_rate * (b1 * m_hat + (1.0 - b1) * g_hat) / (
        np.sqrt(v_hat) + cfg.epsilon
    )
    return param - step


class Nadam:
    """Per-tensor Nadam states for a whole parameter set."""

    def __init__(self, params: ModelParams, cfg: NadamConfig | None = None):
        self.cfg = cfg or NadamConfig()
        self.states = {
            name: NadamState.like(arr) for name, arr in params.named_parameters()
        }

    def update(self, params: ModelParams, grads: dict[str, np.ndarray]) -> None:
        for name, state in self.states.items():
            params.set(name, nadam_step(params.get(name), grads[name], state, self.cfg))


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise DomainError("batch_size must be >= 1")
        if self.epochs < 0:
            raise DomainError("epochs must be >= 0")


@dataclass
class TrainResult:
    params: ModelParams
    loss_curve: list[float] = field(default_factory=list)


def train(
    params: ModelParams,
    samples: list[ImageSample],
    tc: TrainConfig,
    nc: NadamConfig | None = None,
) -> TrainResult:
    """Train in place-order determinism: (seed, data, config) fix the result."""
    if not samples:
        raise DomainError("training requires a non-empty dataset")
    num_classes = params.config.num_classes
    for s in samples:
        if not 0 <= s.label < num_classes:
            raise DomainError(f"sample {s.id!r} has label {s.label} >= {num_classes}")

    nc = nc or NadamConfig()
    optimizer = Nadam(params, nc)
    rng = Rng(derive_seed(tc.seed, "train-shuffle"))
    n = len(samples)
    curve: list[float] = []

    for epoch in range(tc.epochs):
        order = rng.permutation(n) if tc.shuffle else np.arange(n)
        epoch_loss = 0.0
        for start in range(0, n, tc.batch_size):
            batch = order[start : start + tc.batch_size]
            grads = zero_gradients(params)
            batch_loss = 0.0
            for idx in batch:
                sample = samples[int(idx)]
                trace = forward(sample.pixels, params)
                loss = cross_entropy(trace.probs, sample.label)
                if not np.isfinite(loss):
                    raise NumericFailure(
                        f"non-finite loss at epoch {epoch}, step {start // tc.batch_size}"
                    )
                backward(trace, sample.label, params, grads)
                batch_loss += loss
            inv = 1.0 / len(batch)
            for name in grads:
                grads[name] *= inv
            optimizer.update(params, grads)
            epoch_loss += batch_loss
        curve.append(epoch_loss / n)
    return TrainResult(params=params, loss_curve=curve)


def predict_labels(params: ModelParams, samples: list[ImageSample]) -> np.ndarray:
    """Head predictions; probability ties resolve to the lower class index."""
    return np.array(
        [int(np.argmax(forward(s.pixels, params).probs)) for s in samples],
        dtype=np.int64,
    )


def evaluate(
    params: ModelParams, samples: list[ImageSample]
) -> tuple[float, ConfusionMatrix]:
    preds = predict_labels(params, samples)
    truth = np.array([s.label for s in samples], dtype=np.int64)
    cm = confusion(preds, truth, params.config.num_classes)
    accuracy = float(np.trace(cm.counts) / cm.total) if cm.total else 0.0
    return accuracy, cm


def save_loss_curve(curve: list[float], path: str | Path) -> None:
    lines = ["epoch,loss"] + [f"{i},{v:.17g}" for i, v in enumerate(curve)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


class AttentionFeatureExtractor(BaseEstimator, TransformerMixin):
    """End-to-end trainable feature extractor with the sklearn fit/transform API.

    ``fit`` trains the encoder, gate, and head with cross-entropy;
    ``transform`` returns the gated summary vector per image.  Inputs are
    (n_images, H, W, C) float arrays in [0, 1].
    """

    def __init__(
        self,
        image_size=(32, 32),
        patch_size=8,
        channels=3,
        embed_dim=64,
        num_layers=2,
        num_heads=4,
        mlp_ratio=4.0,
        final_norm=True,
        epochs=50,
        batch_size=8,
        learning_rate=1e-4,
        seed=0,
    ):
        self.image_size = image_size
        self.patch_size = patch_size
        self.channels = channels
        self.embed_dim = embed_dim
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.mlp_ratio = mlp_ratio
        self.final_norm = final_norm
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.seed = seed

    def _config(self, num_classes: int) -> ModelConfig:
        return ModelConfig(
            image_size=tuple(self.image_size),
            patch_size=self.patch_size,
            channels=self.channels,
            embed_dim=self.embed_dim,
            num_layers=self.num_layers,
            num_heads=self.num_heads,
            mlp_ratio=self.mlp_ratio,
            num_classes=num_classes,
            final_norm=self.final_norm,
        )

    def fit(self, X, y):
        y = np.asarray(y, dtype=np.int64)
        if len(X) != len(y):
            raise DimensionError(f"{len(X)} images but {len(y)} labels")
        num_classes = int(y.max()) + 1 if len(y) else 0
        params = init_params(self._config(num_classes), self.seed)
        samples = [
            ImageSample(id=str(i), pixels=np.asarray(img, dtype=np.float64), label=int(lab))
            for i, (img, lab) in enumerate(zip(X, y))
        ]
        result = train(
            params,
            samples,
            TrainConfig(epochs=self.epochs, batch_size=self.batch_size, seed=self.seed),
            NadamConfig(learning_rate=self.learning_rate),
        )
        self.params_ = result.params
        self.loss_curve_ = result.loss_curve
        self.classes_ = np.arange(num_classes)
        return self

    def transform(self, X) -> np.ndarray:
        if not hasattr(self, "params_"):
            raise NotFittedError("fit the extractor before calling transform")
        return np.vstack(
            [extract_features(np.asarray(img, dtype=np.float64), self.params_) for img in X]
        )

    def predict(self, X) -> np.ndarray:
        if not hasattr(self, "params_"):
            raise NotFittedError("fit the extractor before calling predict")
        samples = [
            ImageSample(id=str(i), pixels=np.asarray(img, dtype=np.float64), label=0)
            for i, img in enumerate(X)
        ]
        return predict_labels(self.params_, samples)
