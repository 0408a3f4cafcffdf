"""Linear probe over embedding rows: is a binary attribute decodable?

Features are raw WTE rows (mean of subword rows for multi-token words); the
classifier is logistic regression trained from zeros by full-batch gradient
descent, so every run is deterministic given the split seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoder import EncoderWeights, Vocab
from .errors import DegenerateDataError

DEFAULT_LR = 0.1
DEFAULT_EPOCHS = 2000
DEFAULT_L2 = 1e-4


@dataclass
class ProbeDataset:
    items: list[tuple[str, int]]
    label_names: tuple[str, str]

    def __post_init__(self):
        for word, label in self.items:
            if label not in (0, 1):
                raise DegenerateDataError(f"label for {word!r} must be 0 or 1, got {label}")

    def __len__(self) -> int:
        return len(self.items)

    @classmethod
    def from_json(cls, obj: dict) -> "ProbeDataset":
        return cls(
            items=[(it["word"], int(it["label"])) for it in obj["items"]],
            label_names=(obj["label_names"][0], obj["label_names"][1]),
        )

    @classmethod
    def load(cls, path: str | Path) -> "ProbeDataset":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_json(json.load(f))

    def to_json(self) -> dict:
        return {
            "label_names": list(self.label_names),
            "items": [{"word": w, "label": l} for w, l in self.items],
        }


@dataclass
class ProbeModel:
    weight: np.ndarray
    bias: float


def extract_features(dataset: ProbeDataset, weights: EncoderWeights, vocab: Vocab) -> np.ndarray:
    """One row per word: its WTE row, or the mean of its subword rows."""
    d = weights.wte.shape[1]
    out = np.zeros((len(dataset.items), d))
    for k, (word, _) in enumerate(dataset.items):
        ids = vocab.word_token_ids(word.lower())
        rows = weights.wte.array[ids]
        out[k] = rows[0] if len(ids) == 1 else rows.mean(axis=0)
    return out


def labels_array(dataset: ProbeDataset) -> np.ndarray:
    return np.array([label for _, label in dataset.items], dtype=np.float64)


def split(
    dataset: ProbeDataset, train_fraction: float = 0.8, seed: int = 0
) -> tuple[ProbeDataset, ProbeDataset]:
    """Seeded shuffle, then prefix split; the parts are disjoint and exhaustive."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    n = len(dataset.items)
    order = np.random.default_rng(seed).permutation(n)
    cut = int(round(n * train_fraction))
    cut = min(max(cut, 1), n - 1)
    train = [dataset.items[i] for i in order[:cut]]
    test = [dataset.items[i] for i in order[cut:]]
    return (
        ProbeDataset(train, dataset.label_names),
        ProbeDataset(test, dataset.label_names),
    )


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def logreg_loss(weight: np.ndarray, bias: float, features: np.ndarray,
                labels: np.ndarray, l2: float) -> float:
    """Mean negative log-likelihood plus l2 * ||w||^2 / 2."""
    p = _sigmoid(features @ weight + bias)
    p = np.clip(p, 1e-12, 1.0 - 1e-12)
    nll = -np.mean(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p))
    return float(nll + 0.5 * l2 * float(weight @ weight))


def logreg_grad(weight: np.ndarray, bias: float, features: np.ndarray,
                labels: np.ndarray, l2: float) -> tuple[np.ndarray, float]:
    n = len(labels)
    p = _sigmoid(features @ weight + bias)
    dw = features.T @ (p - labels) / n + l2 * weight
    db = float(np.mean(p - labels))
    return dw, db


def train_logreg(
    features: np.ndarray,
    labels: np.ndarray,
    lr: float = DEFAULT_LR,
    epochs: int = DEFAULT_EPOCHS,
    l2: float = DEFAULT_L2,
) -> ProbeModel:
    if len(labels) < 2:
        raise DegenerateDataError("need at least 2 examples")
    classes = set(int(v) for v in labels)
    if classes != {0, 1}:
        raise DegenerateDataError(f"need both classes present, got labels {sorted(classes)}")
    w = np.zeros(features.shape[1])
    b = 0.0
    for _ in range(epochs):
        dw, db = logreg_grad(w, b, features, labels, l2)
        w = w - lr * dw
        b = b - lr * db
    if not (np.all(np.isfinite(w)) and np.isfinite(b)):
        raise DegenerateDataError("training diverged; lower the learning rate")
    return ProbeModel(weight=w, bias=b)


def predict(model: ProbeModel, features: np.ndarray) -> np.ndarray:
    return (features @ model.weight + model.bias >= 0.0).astype(np.int64)


def accuracy(model: ProbeModel, features: np.ndarray, labels: np.ndarray) -> float:
    """Fraction correct in [0, 1]."""
    return float(np.mean(predict(model, features) == labels.astype(np.int64)))


def accuracy_over_seeds(
    dataset: ProbeDataset,
    weights: EncoderWeights,
    vocab: Vocab,
    seeds: list[int],
    train_fraction: float = 0.8,
    lr: float = DEFAULT_LR,
    epochs: int = DEFAULT_EPOCHS,
    l2: float = DEFAULT_L2,
) -> tuple[float, float]:
    """Mean and population std of test accuracy, in percent, across seeds."""
    if len(seeds) < 2:
        raise ValueError("need at least 2 seeds")
    accs = []
    for seed in seeds:
        train, test = split(dataset, train_fraction, seed)
        model = train_logreg(
            extract_features(train, weights, vocab), labels_array(train), lr, epochs, l2
        )
        accs.append(accuracy(model, extract_features(test, weights, vocab), labels_array(test)))
    accs_pct = 100.0 * np.array(accs)
    return float(accs_pct.mean()), float(accs_pct.std())
