"""Downstream task model: a small MLP trained with Adam on cross-entropy.

Two hidden ReLU layers of 128 units and a 2-way softmax output, written
directly in numpy. Inputs are standardized with train-split statistics that
travel with the model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import canonical
from .datagen.dataset import Dataset
from .errors import DegenerateLabels, ShapeMismatch

HIDDEN = (128, 128)
N_CLASSES = 2
LAYERS = ("1", "2", "3")

# Location is excluded: the protected group is a function of position.
TASK_FEATURES = ("speed_mps", "traffic_load_pps", "snr_db")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 100
    patience: int = 3
    seed: int = 0
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch_size must be >= 1 and max_epochs >= 0")


@dataclass
class MlpModel:
    params: dict[str, np.ndarray]
    mean: np.ndarray
    std: np.ndarray
    features: tuple[str, ...] = TASK_FEATURES
    history: list[dict] = field(default_factory=list)

    @property
    def n_inputs(self) -> int:
        return self.params["W1"].shape[0]

    def predict_proba(self, x) -> np.ndarray:
        return forward(self, x)

    def predict(self, x) -> np.ndarray:
        return argmax_decision(self.predict_proba(x))

    def predict_dataset(self, ds: Dataset) -> np.ndarray:
        return self.predict(ds.features(self.features))

    def to_dict(self) -> dict:
        return {
            "architecture": {"hidden": list(HIDDEN), "classes": N_CLASSES, "activation": "relu"},
            "features": list(self.features),
            "standardize": {"mean": self.mean.tolist(), "std": self.std.tolist()},
            "params": {k: v.tolist() for k, v in sorted(self.params.items())},
            "schema_digest": canonical.digest(list(self.features)),
        }

    def digest(self) -> str:
        return canonical.digest(self.to_dict())

    def save(self, path) -> None:
        Path(path).write_text(canonical.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "MlpModel":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            params={k: np.array(v, dtype=float) for k, v in d["params"].items()},
            mean=np.array(d["standardize"]["mean"]),
            std=np.array(d["standardize"]["std"]),
            features=tuple(d["features"]),
        )


def argmax_decision(probs: np.ndarray) -> np.ndarray:
    """Class decision; exact ties go to class 0."""
    probs = np.atleast_2d(probs)
    return (probs[:, 1] > probs[:, 0]).astype(np.int8)


def init_model(n_inputs: int, rng: np.random.Generator, mean=None, std=None,
               features=TASK_FEATURES) -> MlpModel:
    sizes = (n_inputs, *HIDDEN, N_CLASSES)
    params = {}
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]), start=1):
        params[f"W{i}"] = rng.standard_normal((a, b)) * np.sqrt(2.0 / a)
        params[f"b{i}"] = np.zeros(b)
    return MlpModel(
        params,
        np.zeros(n_inputs) if mean is None else np.asarray(mean, float),
        np.ones(n_inputs) if std is None else np.asarray(std, float),
        tuple(features),
    )


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward_cache(model: MlpModel, x: np.ndarray):
    p = model.params
    h0 = (x - model.mean) / model.std
    z1 = h0 @ p["W1"] + p["b1"]
    h1 = np.maximum(z1, 0.0)
    z2 = h1 @ p["W2"] + p["b2"]
    h2 = np.maximum(z2, 0.0)
    z3 = h2 @ p["W3"] + p["b3"]
    return (h0, z1, h1, z2, h2), _softmax(z3)


def _check_input(model: MlpModel, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != model.n_inputs:
        raise ShapeMismatch(f"expected {model.n_inputs} features, got {x.shape[1]}")
    return x, single


def forward(model: MlpModel, features) -> np.ndarray:
    """Class probabilities for one feature vector or a batch of rows."""
    x, single = _check_input(model, features)
    _, probs = _forward_cache(model, x)
    return probs[0] if single else probs


def loss(model: MlpModel, x, y) -> float:
    x, _ = _check_input(model, x)
    _, probs = _forward_cache(model, x)
    y = np.asarray(y, dtype=np.int64)
    return float(-np.mean(np.log(np.clip(probs[np.arange(y.size), y], 1e-300, None))))


def backward(model: MlpModel, x, y) -> dict[str, np.ndarray]:
    """Gradient of the mean cross-entropy over the batch w.r.t. every parameter."""
    x, _ = _check_input(model, x)
    y = np.asarray(y, dtype=np.int64)
    if y.size == 0 or y.size != x.shape[0]:
        raise ShapeMismatch(f"batch has {x.shape[0]} rows and {y.size} labels")
    if np.any((y != 0) & (y != 1)):
        raise ShapeMismatch("labels must be 0 or 1")
    p = model.params
    (h0, z1, h1, z2, h2), probs = _forward_cache(model, x)
    n = y.size
    d3 = probs.copy()
    d3[np.arange(n), y] -= 1.0
    d3 /= n
    grads = {"W3": h2.T @ d3, "b3": d3.sum(axis=0)}
    d2 = (d3 @ p["W3"].T) * (z2 > 0)
    grads["W2"] = h1.T @ d2
    grads["b2"] = d2.sum(axis=0)
    d1 = (d2 @ p["W2"].T) * (z1 > 0)
    grads["W1"] = h0.T @ d1
    grads["b1"] = d1.sum(axis=0)
    return grads


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** self.t
        corr2 = 1.0 - b2 ** self.t
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            params[k] -= self.lr * (self.m[k] / corr1) / (np.sqrt(self.v[k] / corr2) + self.eps)


def split_indices(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle; the last ``val_fraction`` of it is the validation split."""
    order = np.random.default_rng([seed, 0x5EA1]).permutation(n)
    n_val = int(round(val_fraction * n))
    return order[: n - n_val], order[n - n_val:]


def fit(x, y, cfg: TrainConfig, val: tuple[np.ndarray, np.ndarray] | None = None,
        features=TASK_FEATURES) -> MlpModel:
    """Train on arrays. Without ``val`` the validation split comes from ``x``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    if np.unique(y).size < 2:
        raise DegenerateLabels("training labels contain a single class")
    if val is None:
        tr, va = split_indices(y.size, cfg.val_fraction, cfg.seed)
        x_tr, y_tr, x_va, y_va = x[tr], y[tr], x[va], y[va]
    else:
        x_tr, y_tr = x, y
        x_va, y_va = np.asarray(val[0], dtype=float), np.asarray(val[1], dtype=np.int64)

    mean = x_tr.mean(axis=0)
    std = x_tr.std(axis=0)
    std[std < 1e-12] = 1.0
    rng = np.random.default_rng([cfg.seed, 0xADA])
    model = init_model(x.shape[1], rng, mean, std, features)
    opt = Adam(model.params, cfg.learning_rate)

    best = np.inf
    best_params = {k: v.copy() for k, v in model.params.items()}
    stale = 0
    n = y_tr.size
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            opt.step(model.params, backward(model, x_tr[idx], y_tr[idx]))
        val_loss = loss(model, x_va, y_va) if y_va.size else loss(model, x_tr, y_tr)
        model.history.append({"epoch": epoch + 1, "train_loss": loss(model, x_tr, y_tr),
                              "val_loss": val_loss})
        if val_loss < best:
            best = val_loss
            best_params = {k: v.copy() for k, v in model.params.items()}
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    model.params = best_params
    return model


def train(data: Dataset, cfg: TrainConfig, features=TASK_FEATURES) -> MlpModel:
    """Fit the task model to predict ``label`` from ``features`` of a dataset."""
    return fit(data.features(features), data["label"], cfg, features=features)


def accuracy(model: MlpModel, data: Dataset) -> float:
    return float(np.mean(model.predict_dataset(data) == data["label"]))


DEFAULT_GRID = {"learning_rate": (1e-3, 1e-2), "batch_size": (32, 128)}


def grid_search(data: Dataset, base: TrainConfig, grid=None,
                features=TASK_FEATURES) -> tuple[MlpModel, list[dict]]:
    """Train every (learning_rate, batch_size) pair; keep the lowest validation loss.

    Ties go to the earlier grid point so selection is deterministic.
    """
    grid = grid or DEFAULT_GRID
    x, y = data.features(features), data["label"]
    best, table = None, []
    for lr in grid["learning_rate"]:
        for bs in grid["batch_size"]:
            cfg = replace(base, learning_rate=float(lr), batch_size=int(bs))
            model = fit(x, y, cfg, features=features)
            score = min(h["val_loss"] for h in model.history) if model.history else np.inf
            table.append({"learning_rate": float(lr), "batch_size": int(bs),
                          "val_loss": float(score), "epochs": len(model.history)})
            if best is None or score < best[0]:
                best = (score, model)
    return best[1], table
