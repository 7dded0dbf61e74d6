"""Gradient-boosted regression trees for the process surrogate.

Squared-error boosting with exact greedy splits: with G the residual sum
and H the row count of a node, a split is scored by

    gain = G_L^2/(H_L + lam) + G_R^2/(H_R + lam) - (G_L + G_R)^2/(H_L + H_R + lam)

and a leaf predicts G/(H + lam).  Predictions are
base_score + learning_rate * sum of leaf values.  Everything is
deterministic given the data; only cross-validation folds consume a
seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dataset import Dataset, InvalidConfig
from .util import child_rng


class SurrogateError(Exception):
    pass


class EmptyDataset(SurrogateError):
    pass


class NonFiniteTarget(SurrogateError):
    pass


class WidthMismatch(SurrogateError):
    pass


class TooFewRows(SurrogateError):
    pass


@dataclass(frozen=True)
class BoostParams:
    n_trees: int = 300
    learning_rate: float = 0.1
    max_depth: int = 4
    lambda_: float = 1.0
    min_gain: float = 1e-6

    def __post_init__(self):
        if self.n_trees < 1:
            raise InvalidConfig("n_trees must be >= 1")
        if not (0 <= self.max_depth <= 8):
            raise InvalidConfig("max_depth must lie in [0, 8]")
        if not (0.0 < self.learning_rate <= 1.0):
            raise InvalidConfig("learning_rate must lie in (0, 1]")
        if self.lambda_ < 0.0:
            raise InvalidConfig("lambda_ must be >= 0")
        if self.min_gain < 0.0:
            raise InvalidConfig("min_gain must be >= 0")

    def to_dict(self) -> dict:
        return {
            "n_trees": self.n_trees,
            "learning_rate": self.learning_rate,
            "max_depth": self.max_depth,
            "lambda_": self.lambda_,
            "min_gain": self.min_gain,
        }

    @classmethod
    def from_dict(cls, d) -> "BoostParams":
        return cls(**d)


@dataclass
class Tree:
    """Flat node arrays; feature -1 marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    gain: np.ndarray
    count: np.ndarray

    def n_nodes(self) -> int:
        return len(self.feature)

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "gain": self.gain.tolist(),
            "count": self.count.tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> "Tree":
        return cls(
            feature=np.asarray(d["feature"], dtype=np.int32),
            threshold=np.asarray(d["threshold"], dtype=np.float64),
            left=np.asarray(d["left"], dtype=np.int32),
            right=np.asarray(d["right"], dtype=np.int32),
            value=np.asarray(d["value"], dtype=np.float64),
            gain=np.asarray(d["gain"], dtype=np.float64),
            count=np.asarray(d["count"], dtype=np.int64),
        )


@dataclass
class SurrogateModel:
    base_score: float
    trees: tuple[Tree, ...]
    params: BoostParams
    feature_names: tuple[str, ...]
    total_gain: np.ndarray
    scaling: dict[str, tuple[float, float]] | None = None
    train_mse: tuple[float, ...] = ()

    def to_dict(self) -> dict:
        return {
            "base_score": self.base_score,
            "params": self.params.to_dict(),
            "feature_names": list(self.feature_names),
            "total_gain": self.total_gain.tolist(),
            "scaling": None
            if self.scaling is None
            else {k: [v[0], v[1]] for k, v in self.scaling.items()},
            "train_mse": list(self.train_mse),
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d) -> "SurrogateModel":
        return cls(
            base_score=float(d["base_score"]),
            trees=tuple(Tree.from_dict(t) for t in d["trees"]),
            params=BoostParams.from_dict(d["params"]),
            feature_names=tuple(d["feature_names"]),
            total_gain=np.asarray(d["total_gain"], dtype=np.float64),
            scaling=None
            if d["scaling"] is None
            else {k: (float(v[0]), float(v[1])) for k, v in d["scaling"].items()},
            train_mse=tuple(float(v) for v in d["train_mse"]),
        )


class _TreeBuilder:
    def __init__(self):
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.value: list[float] = []
        self.gain: list[float] = []
        self.count: list[int] = []

    def add(self) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(0.0)
        self.gain.append(0.0)
        self.count.append(0)
        return len(self.feature) - 1

    def freeze(self) -> Tree:
        return Tree(
            feature=np.asarray(self.feature, dtype=np.int32),
            threshold=np.asarray(self.threshold, dtype=np.float64),
            left=np.asarray(self.left, dtype=np.int32),
            right=np.asarray(self.right, dtype=np.int32),
            value=np.asarray(self.value, dtype=np.float64),
            gain=np.asarray(self.gain, dtype=np.float64),
            count=np.asarray(self.count, dtype=np.int64),
        )


def _grow_tree(X, resid, presort, xsorted, hp, contrib, gain_acc):
    n, n_feat = X.shape
    tb = _TreeBuilder()
    root = tb.add()
    stack = [(root, np.ones(n, dtype=bool), 0)]
    lam = hp.lambda_
    while stack:
        node, mask, depth = stack.pop()
        rs_node = resid[mask]
        h = rs_node.size
        g = float(rs_node.sum())
        tb.value[node] = g / (h + lam)
        tb.count[node] = h
        if depth >= hp.max_depth or h < 2:
            contrib[mask] = tb.value[node]
            continue
        best_gain = -np.inf
        best_feat = -1
        best_thr = 0.0
        parent = g * g / (h + lam)
        for j in range(n_feat):
            keep = mask[presort[j]]
            vals = xsorted[j][keep]
            boundary = vals[1:] > vals[:-1]
            if not boundary.any():
                continue
            rs = resid[presort[j][keep]]
            cum = np.cumsum(rs[:-1])
            hl = np.arange(1, h, dtype=np.float64)
            gr = g - cum
            gains = cum * cum / (hl + lam) + gr * gr / ((h - hl) + lam) - parent
            gains = np.where(boundary, gains, -np.inf)
            i = int(np.argmax(gains))
            if gains[i] > best_gain:
                best_gain = float(gains[i])
                best_feat = j
                lo, hi = vals[i], vals[i + 1]
                thr = 0.5 * (lo + hi)
                best_thr = float(hi) if thr <= lo else float(thr)
        if best_feat < 0 or best_gain <= hp.min_gain:
            contrib[mask] = tb.value[node]
            continue
        go_left = X[:, best_feat] < best_thr
        left_mask = mask & go_left
        right_mask = mask & ~go_left
        li = tb.add()
        ri = tb.add()
        tb.feature[node] = best_feat
        tb.threshold[node] = best_thr
        tb.left[node] = li
        tb.right[node] = ri
        tb.gain[node] = best_gain
        gain_acc[best_feat] += best_gain
        stack.append((ri, right_mask, depth + 1))
        stack.append((li, left_mask, depth + 1))
    return tb.freeze()


def _check_matrix(X, n_feat: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != n_feat:
        raise WidthMismatch(
            f"expected {n_feat} feature columns, got shape {X.shape}"
        )
    return X


def fit(ds: Dataset, params: BoostParams | None = None) -> SurrogateModel:
    """Fit the boosted ensemble on an encoded dataset.

    The dataset's scaling is frozen into the model so raw-unit inputs
    can be mapped into model space later.
    """
    hp = params or BoostParams()
    if not ds.is_encoded():
        raise InvalidConfig("dataset still holds unencoded categorical columns")
    X = ds.rows
    y = ds.targets
    n = X.shape[0]
    if n == 0:
        raise EmptyDataset("cannot fit on an empty dataset")
    if X.shape[1] == 0:
        raise InvalidConfig("dataset has no feature columns")
    if not np.all(np.isfinite(y)):
        raise NonFiniteTarget("target vector holds non-finite values")

    presort = [np.argsort(X[:, j], kind="stable") for j in range(X.shape[1])]
    xsorted = [X[presort[j], j] for j in range(X.shape[1])]

    base = float(np.mean(y))
    pred = np.full(n, base, dtype=np.float64)
    trees: list[Tree] = []
    gain_acc = np.zeros(X.shape[1], dtype=np.float64)
    mse_path: list[float] = []
    contrib = np.empty(n, dtype=np.float64)
    for _ in range(hp.n_trees):
        resid = y - pred
        tree = _grow_tree(X, resid, presort, xsorted, hp, contrib, gain_acc)
        trees.append(tree)
        pred += hp.learning_rate * contrib
        err = y - pred
        mse_path.append(float(np.mean(err * err)))
    return SurrogateModel(
        base_score=base,
        trees=tuple(trees),
        params=hp,
        feature_names=tuple(ds.feature_names),
        total_gain=gain_acc,
        scaling=None if ds.scaling is None else dict(ds.scaling),
        train_mse=tuple(mse_path),
    )


def _predict_tree(tree: Tree, X: np.ndarray) -> np.ndarray:
    n = X.shape[0]
    idx = np.zeros(n, dtype=np.int32)
    rows = np.arange(n)
    while True:
        f = tree.feature[idx]
        active = f >= 0
        if not active.any():
            break
        xi = X[rows, np.where(active, f, 0)]
        nxt = np.where(xi < tree.threshold[idx], tree.left[idx], tree.right[idx])
        idx = np.where(active, nxt, idx)
    return tree.value[idx]


def predict(model: SurrogateModel, X) -> np.ndarray:
    """Evaluate the ensemble on rows in model feature space."""
    if isinstance(X, Dataset):
        X = X.rows
    X = _check_matrix(X, len(model.feature_names))
    out = np.full(X.shape[0], model.base_score, dtype=np.float64)
    lr = model.params.learning_rate
    for tree in model.trees:
        out += lr * _predict_tree(tree, X)
    return out


def apply_scaling(model: SurrogateModel, X_raw) -> np.ndarray:
    """Map raw-unit rows into model space using the frozen scaling."""
    X = _check_matrix(X_raw, len(model.feature_names)).copy()
    if model.scaling:
        for j, name in enumerate(model.feature_names):
            if name in model.scaling:
                mu, sd = model.scaling[name]
                X[:, j] = (X[:, j] - mu) / sd
    return X


def predict_raw(model: SurrogateModel, X_raw) -> np.ndarray:
    return predict(model, apply_scaling(model, X_raw))


def residuals(model: SurrogateModel, ds: Dataset) -> np.ndarray:
    """Holdout residuals y - prediction, row-aligned with ds."""
    if not np.all(np.isfinite(ds.targets)):
        raise NonFiniteTarget("target vector holds non-finite values")
    return ds.targets - predict(model, ds.rows)


def feature_importance(
    model: SurrogateModel, top_q: int | None = None
) -> list[tuple[str, float]]:
    """Features by descending total split gain; ties keep feature order."""
    order = sorted(
        range(len(model.feature_names)), key=lambda j: (-model.total_gain[j], j)
    )
    out = [(model.feature_names[j], float(model.total_gain[j])) for j in order]
    if top_q is not None:
        if top_q < 1:
            raise InvalidConfig("top_q must be >= 1")
        out = out[:top_q]
    return out


def _metrics(y, yhat) -> dict:
    err = y - yhat
    sse = float(err @ err)
    sst = float(np.sum((y - y.mean()) ** 2))
    return {
        "r2": 1.0 - sse / sst if sst > 0 else (1.0 if sse == 0 else 0.0),
        "mse": float(np.mean(err * err)),
        "mae": float(np.mean(np.abs(err))),
    }


@dataclass
class CvReport:
    k: int
    fold_metrics: list[dict]
    aggregate: dict

    def render(self) -> str:
        a = self.aggregate
        return f"R² = {a['r2']:.3f}, MAE = {a['mae']:.3f}, MSE = {a['mse']:.3f}"

    def to_dict(self) -> dict:
        return {"k": self.k, "fold_metrics": self.fold_metrics, "aggregate": self.aggregate}


def cross_validate(
    ds: Dataset, params: BoostParams | None = None, k: int = 10, seed: int = 0
) -> CvReport:
    """K-fold CV with a seeded shuffle; aggregate metrics are computed on
    the pooled out-of-fold predictions."""
    n = ds.n_rows
    if k < 2:
        raise TooFewRows("cross-validation needs k >= 2")
    if n < k:
        raise TooFewRows(f"{n} rows cannot form {k} folds")
    hp = params or BoostParams()
    perm = child_rng(seed, "cv_folds").permutation(n)
    folds = np.array_split(perm, k)
    oof = np.empty(n, dtype=np.float64)
    fold_metrics = []
    for fold in folds:
        mask = np.ones(n, dtype=bool)
        mask[fold] = False
        model = fit(ds.take(np.flatnonzero(mask)), hp)
        yhat = predict(model, ds.rows[fold])
        oof[fold] = yhat
        fold_metrics.append(_metrics(ds.targets[fold], yhat))
    return CvReport(k=k, fold_metrics=fold_metrics, aggregate=_metrics(ds.targets, oof))
