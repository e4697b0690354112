"""Learned C/I/D policy: features, feature selection and a kernel SVM.

The classifier is a one-vs-rest soft-margin SVM with an RBF kernel, trained
per class with SMO (maximal-violating-pair working set selection using
second-order information, as in LIBSVM).
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dp import BEAM_WIDTH, AggregateAction, lattice_for, plan_approx
from .errors import DataError, DegenerateData, Infeasible, ModelFormatError
from .fleet import EPS, FleetState
from .market import Scenario

MODEL_VERSION = 1
N_FEATURES = 10
N_SELECTED = 5
LOOKAHEAD = 4
CLASSES = (AggregateAction.C, AggregateAction.I, AggregateAction.D)

FEATURE_NAMES = (
    "time_fraction",
    "mean_soc_fraction",
    "min_soc_fraction",
    "max_soc_fraction",
    "fraction_at_target",
    "volume_per_ev",
    "price",
    "excess_cost",
    "lookahead_price",
    "lookahead_volume_per_ev",
)


class NonConvergence(UserWarning):
    """SMO hit its iteration limit before the KKT gap fell below tolerance."""


@dataclass
class TrainingSample:
    features: np.ndarray
    label: AggregateAction
    scenario_id: int = 0
    slot: int = 0


def extract_features(state: FleetState, scenario: Scenario, k: int) -> np.ndarray:
    """Ten fleet-size independent features for slot ``k``.

    SoC enters only through aggregates and volumes are divided by the
    fleet size, so one model serves any number of EVs. The lookahead
    covers the rest of the current hour (slots k+1 .. k+3); at the last
    slot the current values stand in.
    """
    if not 0 <= k < scenario.n_slots:
        raise IndexError(f"slot {k} outside 0..{scenario.n_slots - 1}")
    caps = np.array([s.capacity_kwh for s in scenario.fleet])
    targets = np.array([s.target_soc_kwh for s in scenario.fleet])
    return features_from_socs(state.socs, caps, targets, scenario, k)


def features_from_socs(socs: np.ndarray, caps: np.ndarray, targets: np.ndarray,
                       scenario: Scenario, k: int) -> np.ndarray:
    n = scenario.n_slots
    d = max(len(socs), 1)
    if len(socs):
        frac = socs / caps
        mean_f, min_f, max_f = float(frac.mean()), float(frac.min()), float(frac.max())
        at_target = float(np.mean(socs >= targets - EPS))
    else:
        mean_f = min_f = max_f = at_target = 1.0
    lo, hi = k + 1, min(k + LOOKAHEAD, n)
    if hi > lo:
        ahead_rho = math.fsum(scenario.rho[lo:hi]) / (hi - lo)
        ahead_vol = math.fsum(scenario.volumes[lo:hi]) / (hi - lo) / d
    else:
        ahead_rho, ahead_vol = scenario.rho[k], scenario.volumes[k] / d
    return np.array([
        k / n,
        mean_f,
        min_f,
        max_f,
        at_target,
        scenario.volumes[k] / d,
        scenario.rho[k],
        scenario.sigma[k],
        ahead_rho,
        ahead_vol,
    ])


def label_scenario(scenario: Scenario, scenario_id: int = 0, max_states: int | None = BEAM_WIDTH) -> list[TrainingSample]:
    """One sample per slot along the restricted-DP schedule of ``scenario``."""
    lat = lattice_for(scenario)
    if not lat.target_reachable():
        raise Infeasible("a target lies above the highest reachable SoC")
    labels, steps = plan_approx(scenario, max_states=max_states)
    caps = np.array([s.capacity_kwh for s in scenario.fleet])
    targets = np.array([s.target_soc_kwh for s in scenario.fleet])
    pos = np.zeros(lat.d, dtype=np.int64)
    out = []
    for k, label in enumerate(labels):
        feats = features_from_socs(lat.socs(pos), caps, targets, scenario, k)
        out.append(TrainingSample(feats, label, scenario_id, k))
        pos = pos + steps[k]
    return out


def _as_arrays(samples) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(samples, tuple):
        X, y = samples
        return np.asarray(X, dtype=float), np.asarray(y, dtype=int)
    X = np.array([s.features for s in samples], dtype=float).reshape(len(samples), -1)
    y = np.array([AggregateAction(s.label).index for s in samples], dtype=int)
    return X, y


def select_features(samples, max_depth: int = 8, min_leaf: int = 5, k: int = N_SELECTED) -> list[int]:
    """Indices of the ``k`` most important features according to one CART tree.

    Importance is the total Gini decrease per feature. Constant features are
    never selected; ties go to the lower index.
    """
    from sklearn.tree import DecisionTreeClassifier

    X, y = _as_arrays(samples)
    if len(np.unique(y)) < 2:
        raise DegenerateData("feature selection needs at least two classes")
    std = X.std(axis=0)
    varying = np.flatnonzero(std > 0)
    if len(varying) < k:
        raise DegenerateData(f"only {len(varying)} non-constant features, need {k}")
    Z = (X[:, varying] - X[:, varying].mean(axis=0)) / std[varying]
    tree = DecisionTreeClassifier(criterion="gini", max_depth=max_depth, min_samples_leaf=min_leaf, random_state=0)
    tree.fit(Z, y)
    imp = np.zeros(X.shape[1])
    imp[varying] = tree.tree_.compute_feature_importances(normalize=False)
    order = sorted(varying.tolist(), key=lambda i: (-imp[i], i))
    return order[:k]


def rbf_kernel(A: np.ndarray, B: np.ndarray, gamma: float) -> np.ndarray:
    sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.exp(-gamma * np.maximum(sq, 0.0))


@dataclass
class BinarySvm:
    support_vectors: np.ndarray
    dual_coef: np.ndarray  # alpha_i * y_i
    bias: float
    kkt_gap: float
    converged: bool

    def decision(self, Z: np.ndarray, gamma: float) -> np.ndarray:
        if len(self.dual_coef) == 0:
            return np.full(len(Z), self.bias)
        return rbf_kernel(Z, self.support_vectors, gamma) @ self.dual_coef + self.bias


def smo(K: np.ndarray, y: np.ndarray, C: float = 1.0, tol: float = 1e-3, max_iter: int = 100_000):
    """Solve the soft-margin SVM dual for labels ``y`` in {-1, +1}.

    Returns ``(alpha, bias, kkt_gap, converged)`` with the decision function
    ``sum_i alpha_i y_i K(x_i, x) + bias``.
    """
    n = len(y)
    y = y.astype(float)
    alpha = np.zeros(n)
    grad = -np.ones(n)  # gradient of 0.5 a'Qa - e'a, Q = yy' * K
    diag = np.diag(K).copy()
    gap = math.inf
    converged = False
    for _ in range(max_iter):
        yg = -y * grad
        up = ((alpha < C) & (y > 0)) | ((alpha > 0) & (y < 0))
        low = ((alpha < C) & (y < 0)) | ((alpha > 0) & (y > 0))
        if not up.any() or not low.any():
            gap = 0.0
            converged = True
            break
        i = int(np.flatnonzero(up)[np.argmax(yg[up])])
        m_up = yg[i]
        m_low = yg[low].min()
        gap = m_up - m_low
        if gap < tol:
            converged = True
            break
        cand = low & (yg < m_up)
        b = m_up - yg[cand]
        a = diag[i] + diag[cand] - 2.0 * K[i, cand]
        a = np.where(a > 1e-12, a, 1e-12)
        idx = np.flatnonzero(cand)
        j = int(idx[np.argmin(-(b * b) / a)])
        aij = max(diag[i] + diag[j] - 2.0 * K[i, j], 1e-12)
        lam = (m_up - yg[j]) / aij
        lam = min(lam, C - alpha[i] if y[i] > 0 else alpha[i])
        lam = min(lam, alpha[j] if y[j] > 0 else C - alpha[j])
        alpha[i] += y[i] * lam
        alpha[j] -= y[j] * lam
        # clamp round-off at the box edges
        for t in (i, j):
            if alpha[t] < 1e-14:
                alpha[t] = 0.0
            elif alpha[t] > C - 1e-14:
                alpha[t] = C
        grad += y * lam * (K[:, i] - K[:, j])
    yg = -y * grad
    free = (alpha > 0) & (alpha < C)
    if free.any():
        rho = float(np.mean(y[free] * grad[free]))
    else:
        up = ((alpha < C) & (y > 0)) | ((alpha > 0) & (y < 0))
        low = ((alpha < C) & (y < 0)) | ((alpha > 0) & (y > 0))
        hi = yg[up].max() if up.any() else 0.0
        lo = yg[low].min() if low.any() else 0.0
        rho = -float(hi + lo) / 2.0
    return alpha, -rho, float(gap), converged


@dataclass
class SvcModel:
    selected_feature_indices: list[int]
    mean: np.ndarray
    std: np.ndarray
    gamma: float
    machines: list[BinarySvm]
    C: float = 1.0
    meta: dict = field(default_factory=dict)

    def scale(self, raw: np.ndarray) -> np.ndarray:
        raw = np.atleast_2d(np.asarray(raw, dtype=float))
        return (raw[:, self.selected_feature_indices] - self.mean) / self.std

    def unscale(self, Z: np.ndarray) -> np.ndarray:
        return np.atleast_2d(Z) * self.std + self.mean

    def decision_values(self, raw: np.ndarray) -> np.ndarray:
        Z = self.scale(raw)
        return np.column_stack([m.decision(Z, self.gamma) for m in self.machines])

    def predict_raw(self, raw: np.ndarray) -> np.ndarray:
        """Class indices (0=C, 1=I, 2=D); ties resolve to the lower index."""
        return np.argmax(self.decision_values(raw), axis=1)

    def accuracy(self, X: np.ndarray, y: np.ndarray) -> float:
        return float(np.mean(self.predict_raw(X) == y)) if len(y) else math.nan

    @property
    def converged(self) -> bool:
        return all(m.converged for m in self.machines)

    # -- serialization ----------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "version": MODEL_VERSION,
            "classes": [c.value for c in CLASSES],
            "selected_feature_indices": [int(i) for i in self.selected_feature_indices],
            "scaler": {"mean": self.mean.tolist(), "std": self.std.tolist()},
            "kernel": {"type": "rbf", "gamma": self.gamma},
            "C": self.C,
            "machines": [
                {
                    "support_vectors": m.support_vectors.tolist(),
                    "dual_coef": m.dual_coef.tolist(),
                    "bias": m.bias,
                    "kkt_gap": m.kkt_gap,
                    "converged": m.converged,
                }
                for m in self.machines
            ],
            "meta": self.meta,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def from_dict(cls, data: dict) -> "SvcModel":
        if data.get("version") != MODEL_VERSION:
            raise ModelFormatError(f"unsupported model version {data.get('version')!r}, expected {MODEL_VERSION}")
        try:
            machines = [
                BinarySvm(
                    np.array(m["support_vectors"], dtype=float).reshape(len(m["dual_coef"]), -1),
                    np.array(m["dual_coef"], dtype=float),
                    float(m["bias"]),
                    float(m["kkt_gap"]),
                    bool(m["converged"]),
                )
                for m in data["machines"]
            ]
            return cls(
                [int(i) for i in data["selected_feature_indices"]],
                np.array(data["scaler"]["mean"], dtype=float),
                np.array(data["scaler"]["std"], dtype=float),
                float(data["kernel"]["gamma"]),
                machines,
                float(data.get("C", 1.0)),
                dict(data.get("meta", {})),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelFormatError(f"malformed model file: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "SvcModel":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ModelFormatError(f"cannot read model {path}: {exc}") from exc
        return cls.from_dict(data)


def train_svc(samples, selected: Sequence[int] | None = None, C: float = 1.0, tol: float = 1e-3,
              max_iter: int = 100_000, seed: int = 0) -> SvcModel:
    """Fit the one-vs-rest RBF SVM on the selected (or tree-selected) features."""
    X, y = _as_arrays(samples)
    present = np.unique(y)
    if len(present) < len(CLASSES):
        raise DegenerateData(f"training needs all {len(CLASSES)} classes, got {sorted(present.tolist())}")
    if selected is None:
        selected = select_features((X, y))
    selected = [int(i) for i in selected]
    if len(set(selected)) != len(selected):
        raise ValueError("selected feature indices must be distinct")
    raw = X[:, selected]
    mean = raw.mean(axis=0)
    std = raw.std(axis=0)
    if np.any(std <= 0):
        raise DegenerateData("a selected feature is constant on the training set")
    Z = (raw - mean) / std
    gamma = 1.0 / (Z.shape[1] * float(Z.var(axis=0).mean()))
    K = rbf_kernel(Z, Z, gamma)
    machines = []
    for c in range(len(CLASSES)):
        yc = np.where(y == c, 1.0, -1.0)
        alpha, bias, gap, ok = smo(K, yc, C=C, tol=tol, max_iter=max_iter)
        if not ok:
            warnings.warn(f"class {CLASSES[c].value}: SMO stopped with KKT gap {gap:.3g} > {tol}", NonConvergence)
        sv = alpha > 0
        machines.append(BinarySvm(Z[sv].copy(), alpha[sv] * yc[sv], bias, gap, ok))
    model = SvcModel(selected, mean, std, gamma, machines, C)
    model.meta = {
        "seed": seed,
        "n_samples": int(len(y)),
        "train_accuracy": model.accuracy(X, y),
        "converged": model.converged,
    }
    return model


def predict(model: SvcModel, state: FleetState, scenario: Scenario, k: int) -> AggregateAction:
    return CLASSES[int(model.predict_raw(extract_features(state, scenario, k))[0])]


# -- training-set files -----------------------------------------------------

TRAINING_HEADER = ["scenario_id", "slot"] + [f"f{i}" for i in range(1, N_FEATURES + 1)] + ["label"]


def write_training_csv(samples: Sequence[TrainingSample], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAINING_HEADER)
        for s in samples:
            w.writerow([s.scenario_id, s.slot, *(repr(float(x)) for x in s.features), AggregateAction(s.label).value])


def read_training_csv(path: str | Path) -> list[TrainingSample]:
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read training data {path}: {exc}") from exc
    out = []
    with fh:
        reader = csv.reader(fh)
        if next(reader, None) != TRAINING_HEADER:
            raise DataError(f"{path}: unexpected header")
        for lineno, row in enumerate(reader, start=2):
            try:
                feats = np.array([float(x) for x in row[2:2 + N_FEATURES]])
                if len(feats) != N_FEATURES or not np.all(np.isfinite(feats)):
                    raise ValueError("expected 10 finite features")
                out.append(TrainingSample(feats, AggregateAction(row[2 + N_FEATURES]), int(row[0]), int(row[1])))
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return out
