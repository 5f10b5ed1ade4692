"""Structured-feature neural-network baseline.

Each temporal variable contributes five statistics over its first-24h
readings (mean, population standard deviation, minimum, maximum, and a
missingness indicator); static demographics are one-hot encoded and
concatenated. A two-hidden-layer feed-forward net with sigmoid output is
trained with the same Adam optimizer as the text encoder; features are
standardized with training-split statistics stored inside the model.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .ehr import COMORBIDITIES, RACES, SEXES, FeatureDictionary, StaticProfile
from .model import _gelu, _gelu_grad, _sigmoid

SUMMARY_WINDOW_HOURS = 24.0


@dataclass(frozen=True)
class StatFeatureVector:
    stay_id: str
    values: np.ndarray


def feature_layout(dictionary: FeatureDictionary) -> list:
    """Column names, fixed by dictionary priority order then statics."""
    cols = []
    for entry in dictionary.temporal_entries():
        for stat in ("mean", "std", "min", "max", "missing"):
            cols.append(f"{entry.variable_id}__{stat}")
    cols.append("age")
    cols.extend(f"sex__{s}" for s in SEXES)
    cols.append("bmi")
    cols.extend(f"race__{r}" for r in RACES)
    cols.append("cci")
    cols.extend(COMORBIDITIES)
    return cols


def extract_stat_features(observations, medications, assessments,
                          profile: StaticProfile, dictionary: FeatureDictionary,
                          stay_id: str) -> StatFeatureVector:
    """First-24h statistics per temporal variable plus the static block.

    Missing variables contribute four zeros and indicator 1; a BMI that was
    never recorded enters as 0. Population (divide-by-n) standard deviation,
    so singleton series get std 0.
    """
    series = {}
    for ev in observations:
        if ev.offset_hours < SUMMARY_WINDOW_HOURS and ev.variable_id in dictionary:
            series.setdefault(ev.variable_id, []).append(ev.value)
    for ev in assessments:
        key = ev.kind.lower()
        if ev.offset_hours < SUMMARY_WINDOW_HOURS and key in dictionary:
            series.setdefault(key, []).append(float(ev.value))
    for ev in medications:
        if ev.offset_hours < SUMMARY_WINDOW_HOURS and ev.drug_id in dictionary:
            series.setdefault(ev.drug_id, []).append(ev.dose)

    values = []
    for entry in dictionary.temporal_entries():
        xs = series.get(entry.variable_id)
        if xs:
            arr = np.asarray(xs, dtype=np.float64)
            values.extend([arr.mean(), arr.std(), arr.min(), arr.max(), 0.0])
        else:
            values.extend([0.0, 0.0, 0.0, 0.0, 1.0])
    values.append(profile.age_years)
    values.extend(1.0 if profile.sex == s else 0.0 for s in SEXES)
    values.append(profile.bmi if profile.bmi is not None else 0.0)
    values.extend(1.0 if profile.race == r else 0.0 for r in RACES)
    values.append(float(profile.cci))
    values.extend(1.0 if c in profile.comorbidities else 0.0 for c in COMORBIDITIES)
    return StatFeatureVector(stay_id=stay_id, values=np.asarray(values, dtype=np.float64))


@dataclass
class BaselineModel:
    weights: dict  # w1, b1, w2, b2, w3, b3
    feature_mean: np.ndarray
    feature_std: np.ndarray
    n_features: int
    seed: int


def _forward(weights, x):
    a1 = x @ weights["w1"] + weights["b1"]
    h1, t1 = _gelu(a1)
    a2 = h1 @ weights["w2"] + weights["b2"]
    h2, t2 = _gelu(a2)
    z = h2 @ weights["w3"][:, 0] + weights["b3"][0]
    return z, (a1, t1, h1, a2, t2, h2)


def train_baseline(vectors, labels, hidden: int = 64, learning_rate: float = 1e-3,
                   epochs: int = 200, seed: int = 0, batch_size: int = 64) -> BaselineModel:
    """Train the feed-forward classifier; deterministic given seed."""
    x = np.stack([v.values for v in vectors]).astype(np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if len(np.unique(y)) < 2:
        raise ValueError("training labels contain a single class")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std == 0.0, 1.0, std)
    xs = (x - mean) / std

    rng = np.random.default_rng(seed)
    n_in = x.shape[1]
    def xavier(shape):
        bound = np.sqrt(6.0 / (shape[0] + shape[1]))
        return rng.uniform(-bound, bound, size=shape)
    weights = {
        "w1": xavier((n_in, hidden)), "b1": np.zeros(hidden),
        "w2": xavier((hidden, hidden)), "b2": np.zeros(hidden),
        "w3": xavier((hidden, 1)), "b3": np.zeros(1),
    }
    m = {k: np.zeros_like(v) for k, v in weights.items()}
    v2 = {k: np.zeros_like(v) for k, v in weights.items()}
    b1c, b2c, eps = 0.9, 0.999, 1e-8
    step = 0
    n = xs.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            xb, yb = xs[idx], y[idx]
            z, (a1, t1, h1, a2, t2, h2) = _forward(weights, xb)
            sig = _sigmoid(z)
            dz = (sig - yb) / len(idx)
            grads = {
                "w3": (h2.T @ dz)[:, None], "b3": np.array([dz.sum()]),
            }
            dh2 = dz[:, None] * weights["w3"][:, 0]
            da2 = dh2 * _gelu_grad(a2, t2)
            grads["w2"] = h1.T @ da2
            grads["b2"] = da2.sum(axis=0)
            dh1 = da2 @ weights["w2"].T
            da1 = dh1 * _gelu_grad(a1, t1)
            grads["w1"] = xb.T @ da1
            grads["b1"] = da1.sum(axis=0)
            step += 1
            for k in sorted(weights):
                g = grads[k]
                m[k] = b1c * m[k] + (1 - b1c) * g
                v2[k] = b2c * v2[k] + (1 - b2c) * g * g
                mhat = m[k] / (1 - b1c ** step)
                vhat = v2[k] / (1 - b2c ** step)
                weights[k] = weights[k] - learning_rate * mhat / (np.sqrt(vhat) + eps)
    return BaselineModel(weights=weights, feature_mean=mean, feature_std=std,
                         n_features=n_in, seed=seed)


def score_baseline(model: BaselineModel, vector: StatFeatureVector) -> float:
    return float(score_baseline_many(model, [vector])[0])


def score_baseline_many(model: BaselineModel, vectors) -> np.ndarray:
    x = np.stack([v.values for v in vectors]).astype(np.float64)
    if x.shape[1] != model.n_features:
        raise ValueError(f"feature length {x.shape[1]} != trained layout {model.n_features}")
    xs = (x - model.feature_mean) / model.feature_std
    z, _ = _forward(model.weights, xs)
    return np.clip(_sigmoid(z), 1e-12, 1.0 - 1e-12)


def save_baseline(path, model: BaselineModel) -> None:
    np.savez(path, feature_mean=model.feature_mean, feature_std=model.feature_std,
             n_features=np.array([model.n_features]), seed=np.array([model.seed]),
             **{f"w__{k}": v for k, v in model.weights.items()})


def load_baseline(path) -> BaselineModel:
    with np.load(path) as data:
        weights = {k[len("w__"):]: data[k] for k in data.files if k.startswith("w__")}
        return BaselineModel(weights=weights, feature_mean=data["feature_mean"],
                             feature_std=data["feature_std"],
                             n_features=int(data["n_features"][0]), seed=int(data["seed"][0]))


def write_stat_features_csv(path, vectors, dictionary: FeatureDictionary) -> None:
    cols = feature_layout(dictionary)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stay_id"] + cols)
        for vec in vectors:
            w.writerow([vec.stay_id] + [repr(float(x)) for x in vec.values])
