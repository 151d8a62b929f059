"""Linear soft-margin SVM decision layer, metrics, and split protocol.

The SVM solves the L2-regularized L1-hinge primal through its dual by
coordinate descent with a seeded sample permutation per epoch.  The bias
is handled by augmenting features with a constant 1 (so the bias is
lightly regularized, as in liblinear).  Features are z-scored with a
scaler fitted on the training set and stored in the model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimMismatch,
    EmptyMatrix,
    NonFiniteFeature,
    SingleClassData,
    TooFewAbnormal,
)
from .volcore import _atomic_write_bytes

SCALER_EPS = 1e-12


@dataclass
class SvmModel:
    w: np.ndarray                 # weights in scaled feature space
    b: float
    C: float
    scaler_mean: np.ndarray
    scaler_std: np.ndarray
    alpha: np.ndarray | None = None   # dual coefficients, kept for diagnostics

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64).reshape(-1)
        self.scaler_mean = np.asarray(self.scaler_mean, dtype=np.float64).reshape(-1)
        self.scaler_std = np.asarray(self.scaler_std, dtype=np.float64).reshape(-1)
        if self.alpha is not None:
            self.alpha = np.asarray(self.alpha, dtype=np.float64).reshape(-1)
        if self.C <= 0:
            raise ValueError("C must be positive")
        if len(self.scaler_mean) != len(self.w):
            raise ValueError("scaler dimension != weight dimension")

    def scale(self, X: np.ndarray) -> np.ndarray:
        return (X - self.scaler_mean) / (self.scaler_std + SCALER_EPS)

    def to_dict(self) -> dict:
        d = {"w": self.w.tolist(), "b": self.b, "C": self.C,
             "scaler_mean": self.scaler_mean.tolist(),
             "scaler_std": self.scaler_std.tolist()}
        if self.alpha is not None:
            d["alpha"] = self.alpha.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SvmModel":
        return cls(w=np.array(d["w"]), b=float(d["b"]), C=float(d["C"]),
                   scaler_mean=np.array(d["scaler_mean"]),
                   scaler_std=np.array(d["scaler_std"]),
                   alpha=np.array(d["alpha"]) if "alpha" in d else None)

    def save(self, path: str) -> None:
        _atomic_write_bytes(path, json.dumps(self.to_dict(), sort_keys=True).encode())

    @classmethod
    def load(cls, path: str) -> "SvmModel":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def svm_objectives(Xa: np.ndarray, y: np.ndarray, alpha: np.ndarray,
                   C: float) -> tuple[float, float]:
    """Primal and dual objective for the bias-augmented hinge SVM."""
    w = Xa.T @ (alpha * y)
    margins = 1.0 - y * (Xa @ w)
    primal = 0.5 * w @ w + C * np.maximum(margins, 0.0).sum()
    dual = alpha.sum() - 0.5 * w @ w
    return float(primal), float(dual)


def kkt_residuals(Xa: np.ndarray, y: np.ndarray, alpha: np.ndarray,
                  C: float) -> np.ndarray:
    """Projected-gradient magnitude per sample (0 at exact optimality)."""
    w = Xa.T @ (alpha * y)
    G = y * (Xa @ w) - 1.0
    PG = G.copy()
    PG[(alpha <= 0) & (G > 0)] = 0.0
    PG[(alpha >= C) & (G < 0)] = 0.0
    return np.abs(PG)


def train_svm(X: np.ndarray, y: np.ndarray, C: float = 1.0, tol: float = 1e-4,
              max_iters: int = 10_000, seed: int = 0) -> SvmModel:
    """Fit the linear SVM by dual coordinate descent.

    Stops when both the maximal KKT violation and the relative duality
    gap drop below tol, or after max_iters epochs.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if X.ndim != 2 or X.shape[0] != len(y):
        raise DimMismatch(f"X shape {X.shape} vs y length {len(y)}")
    if not np.isfinite(X).all():
        raise NonFiniteFeature("X contains non-finite values")
    classes = set(np.unique(y))
    if not classes <= {-1.0, 1.0} or len(classes) < 2:
        raise SingleClassData(f"labels must contain both -1 and +1, got {sorted(classes)}")

    mean = X.mean(axis=0)
    std = X.std(axis=0)
    Xs = (X - mean) / (std + SCALER_EPS)
    n = Xs.shape[0]
    Xa = np.hstack([Xs, np.ones((n, 1))])   # bias column

    Q = (Xa * Xa).sum(axis=1)
    alpha = np.zeros(n)
    w = np.zeros(Xa.shape[1])
    rng = np.random.default_rng(seed)

    for _ in range(max_iters):
        max_pg = 0.0
        for i in rng.permutation(n):
            G = y[i] * (Xa[i] @ w) - 1.0
            pg = G
            if alpha[i] <= 0:
                pg = min(G, 0.0)
            elif alpha[i] >= C:
                pg = max(G, 0.0)
            max_pg = max(max_pg, abs(pg))
            if abs(pg) > 1e-14 and Q[i] > 0:
                new_alpha = min(max(alpha[i] - G / Q[i], 0.0), C)
                delta = new_alpha - alpha[i]
                if delta != 0.0:
                    w += delta * y[i] * Xa[i]
                    alpha[i] = new_alpha
        if max_pg <= tol:
            primal, dual = svm_objectives(Xa, y, alpha, C)
            if primal - dual <= tol * (1.0 + abs(primal)):
                break

    # recompute w from alpha for exact primal/dual consistency
    w = Xa.T @ (alpha * y)
    return SvmModel(w=w[:-1], b=float(w[-1]), C=C, scaler_mean=mean,
                    scaler_std=std, alpha=alpha)


def predict(model: SvmModel, x: np.ndarray) -> tuple[int, float]:
    """Label in {-1, +1} (ties go to +1) and the signed margin."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if len(x) != len(model.w):
        raise DimMismatch(f"x has {len(x)} features, model expects {len(model.w)}")
    margin = float(model.w @ model.scale(x) + model.b)
    return (1 if margin >= 0 else -1), margin


def predict_batch(model: SvmModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    margins = model.scale(X) @ model.w + model.b
    return np.where(margins >= 0, 1, -1)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class ConfusionMatrix:
    """2x2 counts; rows = truth (normal, abnormal), cols = prediction."""
    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.shape != (2, 2) or (c < 0).any():
            raise ValueError("confusion matrix must be 2x2 nonnegative counts")
        self.counts = c

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @classmethod
    def from_labels(cls, y_true: np.ndarray, y_pred: np.ndarray) -> "ConfusionMatrix":
        c = np.zeros((2, 2), dtype=np.int64)
        for t, p in zip(y_true, y_pred):
            c[0 if t < 0 else 1, 0 if p < 0 else 1] += 1
        return cls(c)


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise EmptyMatrix("no samples")
    return float(np.trace(cm.counts)) / cm.total


def cohen_kappa(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise EmptyMatrix("no samples")
    total = cm.total
    p_o = float(np.trace(cm.counts)) / total
    rows = cm.counts.sum(axis=1)
    cols = cm.counts.sum(axis=0)
    p_e = float((rows * cols).sum()) / (total * total)
    if p_e == 1.0:
        return 0.0
    return (p_o - p_e) / (1.0 - p_e)


# ---------------------------------------------------------------------------
# split protocol
# ---------------------------------------------------------------------------

@dataclass
class SplitPlan:
    test_ids: list[str]
    svm_train_ids: list[str]
    flim_marker_ids: list[str]
    flim_validation_ids: list[str]
    seed: int

    def to_dict(self) -> dict:
        return {"test_ids": self.test_ids, "svm_train_ids": self.svm_train_ids,
                "flim_marker_ids": self.flim_marker_ids,
                "flim_validation_ids": self.flim_validation_ids,
                "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        return cls(**d)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def make_splits(patients: list[tuple[str, int]], n_splits: int,
                seed: int) -> list[SplitPlan]:
    """Patient-wise 50/50 stratified plans with a held-out kernel-learning subset.

    `patients` is (id, label) with label -1 normal, +1 abnormal.  Per
    plan, each class is split in half at patient granularity; from the
    abnormal train side, max(6, round(10%)) images are reserved and split
    half for marker drawing, half for validation.
    """
    normal = [pid for pid, lab in patients if lab < 0]
    abnormal = [pid for pid, lab in patients if lab > 0]
    if len(normal) < 2 or len(abnormal) < 2:
        raise TooFewAbnormal("need at least 2 patients per class")
    plans = []
    for s in range(n_splits):
        rng = np.random.default_rng(np.random.SeedSequence([seed, s]))
        train, test = [], []
        for group in (normal, abnormal):
            order = [group[i] for i in rng.permutation(len(group))]
            n_train = len(group) - len(group) // 2
            train += order[:n_train]
            test += order[n_train:]
        abn_train = [pid for pid in train if pid in set(abnormal)]
        n_reserved = max(6, _round_half_up(0.1 * len(abn_train)))
        if len(abn_train) < n_reserved + 1:
            raise TooFewAbnormal(
                f"train side has {len(abn_train)} abnormal, need > {n_reserved}")
        reserved = abn_train[:n_reserved]
        n_marker = n_reserved // 2
        flim_marker = reserved[:n_marker]
        flim_validation = reserved[n_marker:]
        svm_train = [pid for pid in train if pid not in set(reserved)]
        plans.append(SplitPlan(test_ids=sorted(test), svm_train_ids=sorted(svm_train),
                               flim_marker_ids=sorted(flim_marker),
                               flim_validation_ids=sorted(flim_validation),
                               seed=seed))
    return plans


def save_splits(plans: list[SplitPlan], path: str) -> None:
    payload = json.dumps([p.to_dict() for p in plans], sort_keys=True).encode()
    _atomic_write_bytes(path, payload)


def load_splits(path: str) -> list[SplitPlan]:
    with open(path) as f:
        return [SplitPlan.from_dict(d) for d in json.load(f)]
