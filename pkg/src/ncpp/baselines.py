"""Linear comparison models: least squares, ridge, lasso and elastic net.

Every model minimises, independently for each output column,

    0.5 * ||y - X w - b||^2 + l1 * ||w||_1 + 0.5 * l2 * ||w||^2

with an unpenalised intercept ``b``.  The design matrix is whatever the
caller passes; :func:`ncpp.encode.flat_features` builds the standard one
(normalised numerics followed by bag-of-token counts).
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

LAMBDA_GRID = (0.001, 0.01, 0.1, 1.0)
KINDS = ("lr", "ridge", "lasso", "elasticnet")


@dataclass(frozen=True)
class Regularization:
    l1: float = 0.0
    l2: float = 0.0

    def __post_init__(self):
        if self.l1 < 0 or self.l2 < 0:
            raise ValueError(f"regularisation strengths must be >= 0, got {self}")


@dataclass
class LinearModel:
    weights: np.ndarray            # [n_features, out_dim]
    intercept: np.ndarray          # [out_dim]
    reg: Regularization
    converged: bool = True
    sweeps: list[int] = field(default_factory=list)
    objective: list[list[float]] = field(default_factory=list)   # per column, per sweep
    feature_names: list[str] | None = None

    @property
    def n_features(self) -> int:
        return self.weights.shape[0]

    def feature_hash(self) -> str:
        blob = json.dumps(self.feature_names or [], separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_json(self) -> dict:
        return {"weights": self.weights.tolist(), "intercept": self.intercept.tolist(),
                "reg": {"l1": self.reg.l1, "l2": self.reg.l2}, "converged": self.converged,
                "feature_names": self.feature_names, "feature_hash": self.feature_hash()}

    @classmethod
    def from_json(cls, obj: dict) -> LinearModel:
        return cls(np.array(obj["weights"], dtype=np.float64).reshape(-1, len(obj["intercept"])),
                   np.array(obj["intercept"], dtype=np.float64),
                   Regularization(obj["reg"]["l1"], obj["reg"]["l2"]), bool(obj.get("converged", True)),
                   feature_names=obj.get("feature_names"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> LinearModel:
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def independent_columns(X, tol: float = 1e-9) -> list[int]:
    """Indices of a maximal set of columns that, with an intercept, have full rank.

    Columns are scanned left to right; one is kept when its centred part has
    a residual above ``tol`` (relative to its norm) after projection onto the
    columns already kept.  Constant columns are therefore always dropped.
    """
    X = np.asarray(X, dtype=np.float64)
    Xc = X - X.mean(axis=0)
    basis = np.zeros((X.shape[0], 0))
    keep = []
    for j in range(X.shape[1]):
        col = Xc[:, j]
        norm = np.linalg.norm(col)
        if norm == 0.0:
            continue
        resid = col - basis @ (basis.T @ col)
        resid -= basis @ (basis.T @ resid)   # second pass for numerical orthogonality
        r = np.linalg.norm(resid)
        if r > tol * norm:
            keep.append(j)
            basis = np.hstack([basis, (resid / r)[:, None]])
    return keep


def objective(X, y, w, b, reg: Regularization) -> float:
    r = y - X @ w - b
    return float(0.5 * r @ r + reg.l1 * np.abs(w).sum() + 0.5 * reg.l2 * w @ w)


def _coordinate_descent(X: np.ndarray, Y: np.ndarray, reg: Regularization, tol: float,
                        max_sweeps: int) -> tuple[np.ndarray, np.ndarray, list[bool], list[int], list[list[float]]]:
    """Cyclic coordinate descent with soft-thresholding on centred data.

    All output columns are swept together through the Gram matrix, but each
    column's coefficients depend only on its own target, and a column stops
    being updated once its largest coefficient change drops below ``tol``.
    Returns (W, b, converged, sweeps, objective history), the last three per
    column.
    """
    n, p = X.shape
    k = Y.shape[1]
    x_mean, y_mean = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - x_mean, Y - y_mean
    G = Xc.T @ Xc
    C = Xc.T @ Yc
    yy = (Yc * Yc).sum(axis=0)
    W = np.zeros((p, k))
    sweeps = [max_sweeps] * k
    converged = [False] * k

    def objectives():
        # 0.5||y - Xw||^2 expanded through the Gram matrix
        fit = 0.5 * yy - (C * W).sum(axis=0) + 0.5 * (W * (G @ W)).sum(axis=0)
        return fit + reg.l1 * np.abs(W).sum(axis=0) + 0.5 * reg.l2 * (W * W).sum(axis=0)

    history = [[float(v)] for v in objectives()]
    diag = np.diag(G)
    cols = np.arange(k)
    Wa, Ca = W.copy(), C.copy()          # compacted to the still-active columns
    for sweep in range(1, max_sweeps + 1):
        max_change = np.zeros(cols.size)
        for j in range(p):
            denom = diag[j] + reg.l2
            if denom == 0.0:
                continue
            old = Wa[j].copy()
            rho = Ca[j] - G[j] @ Wa + diag[j] * old
            new = np.sign(rho) * np.maximum(np.abs(rho) - reg.l1, 0.0) / denom
            Wa[j] = new
            np.maximum(max_change, np.abs(new - old), out=max_change)
        W[:, cols] = Wa
        obj = objectives()
        for c in cols:
            history[c].append(float(obj[c]))
        done = max_change < tol
        for c in cols[done]:
            converged[c] = True
            sweeps[c] = sweep
        if done.all():
            break
        if done.any():
            cols, Wa, Ca = cols[~done], Wa[:, ~done], Ca[:, ~done]
    return W, y_mean - x_mean @ W, converged, sweeps, history


def fit_linear(X, Y, reg: Regularization | None = None, tol: float = 1e-8, max_sweeps: int = 10_000,
               feature_names: list[str] | None = None) -> LinearModel:
    """Fit one linear model per output column.

    With no penalty this is ordinary least squares (pseudo-inverse for
    rank-deficient X); a pure l2 penalty uses the ridge closed form; any l1
    penalty runs coordinate descent with soft-thresholding.
    """
    reg = reg or Regularization()
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise ValueError(f"X {X.shape} and Y {Y.shape} disagree on the number of rows")
    if X.shape[0] == 0:
        raise ValueError("cannot fit on zero rows")
    x_mean = X.mean(axis=0)
    y_mean = Y.mean(axis=0)
    Xc = X - x_mean
    Yc = Y - y_mean
    if reg.l1 == 0.0:
        if reg.l2 == 0.0:
            W = np.linalg.pinv(Xc) @ Yc
        else:
            A = Xc.T @ Xc + reg.l2 * np.eye(X.shape[1])
            W = np.linalg.solve(A, Xc.T @ Yc)
        model = LinearModel(W, y_mean - x_mean @ W, reg, feature_names=feature_names)
    else:
        W, b, conv, sweeps, hist = _coordinate_descent(X, Y, reg, tol, max_sweeps)
        ok = all(conv)
        if not ok:
            log.warning("coordinate descent stopped at %d sweeps without reaching tol=%g on %d column(s)",
                        max_sweeps, tol, conv.count(False))
        model = LinearModel(W, b, reg, ok, sweeps, hist, feature_names)
    if not np.all(np.isfinite(model.weights)):
        raise FloatingPointError("linear fit produced non-finite weights")
    return model


def predict_linear(model: LinearModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise ValueError(f"model expects {model.n_features} features, got array of shape {X.shape}")
    return X @ model.weights + model.intercept


def regularization_for(kind: str, lam: float) -> Regularization:
    """Map a baseline name and strength to its penalty (elastic net splits evenly)."""
    if kind == "lr":
        return Regularization()
    if kind == "ridge":
        return Regularization(0.0, lam)
    if kind == "lasso":
        return Regularization(lam, 0.0)
    if kind == "elasticnet":
        return Regularization(0.5 * lam, 0.5 * lam)
    raise ValueError(f"unknown baseline {kind!r}; known: {KINDS}")


def _mape(pred: np.ndarray, truth: np.ndarray) -> float:
    nz = truth != 0
    return float(np.mean(np.abs(pred[nz] - truth[nz]) / np.abs(truth[nz])) * 100.0)


def select_linear(kind: str, X_train, Y_train, X_val, Y_val, grid=LAMBDA_GRID,
                  feature_names: list[str] | None = None) -> tuple[LinearModel, dict[float, float]]:
    """Fit ``kind`` for every strength in ``grid`` and keep the lowest validation MAPE.

    Returns the chosen model and the validation MAPE of every candidate.
    """
    lams = [0.0] if kind == "lr" else list(grid)
    scores, best = {}, None
    for lam in lams:
        m = fit_linear(X_train, Y_train, regularization_for(kind, lam), feature_names=feature_names)
        scores[lam] = _mape(predict_linear(m, X_val), np.asarray(Y_val))
        if best is None or scores[lam] < scores[best[0]]:
            best = (lam, m)
    return best[1], scores


def design_matrix(data, transforms, names: list[str] | None = None) -> tuple[np.ndarray, list[str]]:
    """Flattened features of ``data``, restricted to ``names`` when given.

    Without ``names`` the columns are pruned to an independent set with
    :func:`independent_columns`, so fit this on the training split and pass
    the returned names for validation/test data.
    """
    from .encode import flat_features

    X, all_names = flat_features(data, transforms)
    if names is None:
        idx = independent_columns(X)
    else:
        pos = {n: i for i, n in enumerate(all_names)}
        missing = [n for n in names if n not in pos]
        if missing:
            raise ValueError(f"design columns not produced by these transforms: {missing[:5]}")
        idx = [pos[n] for n in names]
    return X[:, idx], [all_names[i] for i in idx]


def fit_baselines(train, val, transforms, kinds=KINDS, grid=LAMBDA_GRID) -> dict[str, LinearModel]:
    """Fit each linear baseline on ``train`` with its strength chosen on ``val``.

    Records with any missing label are left out of both fitting and selection.
    """
    train, val = _complete(train), _complete(val)
    X_tr, names = design_matrix(train, transforms)
    X_va, _ = design_matrix(val, transforms, names)
    return {k: select_linear(k, X_tr, train.labels(), X_va, val.labels(), grid, names)[0] for k in kinds}


def _complete(data):
    keep = np.flatnonzero(data.label_mask().all(axis=1))
    return data if len(keep) == len(data) else data.subset(keep)


def predict_baseline(model: LinearModel, data, transforms) -> np.ndarray:
    X, _ = design_matrix(data, transforms, model.feature_names)
    return predict_linear(model, X)
