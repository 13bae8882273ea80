"""Built-in multinomial logistic-regression sign classifier.

Deliberately lightweight: the attack treats any recognition model as a
black-box score oracle, so the bundled model only needs to be a competent,
fully deterministic stand-in. Real models attach through the external
oracle protocol instead.

Feature pipeline: classifier input is a 60x60 RGB image; features are the
bilinear 20x20 downsample scaled to [0, 1], flattened row-major (1200
values).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .imaging import Raster, resize_bilinear

INPUT_PX = 60
FEATURE_PX = 20
N_FEATURES = FEATURE_PX * FEATURE_PX * 3

WEIGHTS_MAGIC = b"ILRC1"

# Fixed full-batch gradient-descent schedule; no stochasticity beyond the
# data itself, so training is bit-deterministic.
_TRAIN_STEPS = 320
_LR_SCHEDULE = ((0, 2.0), (160, 1.0), (240, 0.5))
_L2 = 1e-4


class ClassifierError(Exception):
    pass


@dataclass(frozen=True)
class ClassifierParams:
    labels: tuple[str, ...]
    weights: np.ndarray  # (n_classes, N_FEATURES) float64
    bias: np.ndarray  # (n_classes,) float64

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.shape != (len(self.labels), N_FEATURES) or b.shape != (len(self.labels),):
            raise ClassifierError(f"weight shapes {w.shape}/{b.shape} do not match labels")
        w = w.copy()
        b = b.copy()
        w.flags.writeable = False
        b.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)


def features_from_input(img: Raster) -> np.ndarray:
    """1200-dim feature vector from a 60x60 classifier-input image."""
    if (img.height, img.width) != (INPUT_PX, INPUT_PX):
        raise ClassifierError(f"classifier input must be {INPUT_PX}x{INPUT_PX}")
    small = resize_bilinear(img.as_float(), FEATURE_PX, FEATURE_PX)
    return (small / 255.0).reshape(-1)


def features_batch(inputs: np.ndarray) -> np.ndarray:
    """(N, 1200) features from an (N, 60, 60, 3) float batch.

    Uses the same pixel-center bilinear map as features_from_input; with a
    60 -> 20 integer ratio the sample points are exact pixel centers of
    3x3 blocks, but the general gather form is kept for clarity.
    """
    n = inputs.shape[0]
    sx = INPUT_PX / FEATURE_PX
    coords = (np.arange(FEATURE_PX) + 0.5) * sx - 0.5
    x0 = np.floor(coords).astype(np.intp)
    fx = coords - x0
    x1 = np.minimum(x0 + 1, INPUT_PX - 1)
    rows = (
        inputs[:, x0][:, :, :, :] * (1 - fx)[None, :, None, None]
        + inputs[:, x1][:, :, :, :] * fx[None, :, None, None]
    )
    cols = (
        rows[:, :, x0] * (1 - fx)[None, None, :, None]
        + rows[:, :, x1] * fx[None, None, :, None]
    )
    return (cols / 255.0).reshape(n, -1)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_scores(params: ClassifierParams, feats: np.ndarray) -> np.ndarray:
    return softmax(feats @ params.weights.T + params.bias)


def train(
    features: np.ndarray, label_indices: np.ndarray, labels: tuple[str, ...], seed: int = 0
) -> tuple[ClassifierParams, float]:
    """Full-batch softmax regression; returns (params, training accuracy).

    The seed only feeds the (currently zero-init) starting point, kept in
    the signature so alternative inits stay reproducible.
    """
    n, d = features.shape
    c = len(labels)
    if c < 2:
        raise ClassifierError("need at least two classes to train")
    counts = np.bincount(label_indices, minlength=c)
    if counts.min() < 10:
        raise ClassifierError("need at least 10 images per class")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), label_indices] = 1.0

    w = np.zeros((c, d))
    b = np.zeros(c)
    lr = _LR_SCHEDULE[0][1]
    for step in range(_TRAIN_STEPS):
        for at, rate in _LR_SCHEDULE:
            if step >= at:
                lr = rate
        probs = softmax(features @ w.T + b)
        grad = probs - onehot
        w -= lr * (grad.T @ features / n + _L2 * w)
        b -= lr * grad.mean(axis=0)
    params = ClassifierParams(labels=tuple(labels), weights=w, bias=b)
    acc = float((predict_scores(params, features).argmax(axis=1) == label_indices).mean())
    return params, acc


def save_weights(params: ClassifierParams, path: str) -> None:
    """Flat binary: magic, u32 class count, u32 feature count, f64 weight
    matrix row-major, f64 bias vector (little-endian). Labels travel in a
    sibling JSON file."""
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<II", len(params.labels), N_FEATURES))
        fh.write(params.weights.astype("<f8").tobytes(order="C"))
        fh.write(params.bias.astype("<f8").tobytes(order="C"))
    with open(path + ".labels.json", "w") as fh:
        json.dump(list(params.labels), fh)


def load_weights(path: str, labels: list[str] | None = None) -> ClassifierParams:
    with open(path, "rb") as fh:
        magic = fh.read(5)
        if magic != WEIGHTS_MAGIC:
            raise ClassifierError(f"bad weights magic in {path}: {magic!r}")
        n_classes, n_features = struct.unpack("<II", fh.read(8))
        if n_features != N_FEATURES:
            raise ClassifierError(f"unexpected feature count {n_features}")
        w = np.frombuffer(fh.read(n_classes * n_features * 8), dtype="<f8")
        w = w.reshape(n_classes, n_features)
        b = np.frombuffer(fh.read(n_classes * 8), dtype="<f8")
    if labels is None:
        with open(path + ".labels.json") as fh:
            labels = json.load(fh)
    if len(labels) != n_classes:
        raise ClassifierError("label list does not match stored class count")
    return ClassifierParams(labels=tuple(labels), weights=w, bias=b)
