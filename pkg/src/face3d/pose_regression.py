"""Additive binned regression from feature vectors to relative 6-DoF pose.

A pose is encoded relative to an anchor point ``(x0, y0, s0)`` (keypoint
coordinates at pyramid scale s0) as

    (ux/s0 - x0, uy/s0 - y0, s/s0, pitch, yaw, roll)

and predicted as a sum of per-feature piecewise-constant functions: each
feature's range is cut into equal bins and contributes a learned 6-vector
per bin.  Training minimizes the squared error with momentum SGD plus a
linear feature-removal schedule (one regressor per keypoint type; all six
outputs share the surviving features).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import TrainingDivergedError
from .geometry import Pose6, Rpy, rpy_to_rotation
from .psm import bin_index

SCHEMA_VERSION = 1
N_BINS = 32


@dataclass(frozen=True)
class RelPose:
    """Pose relative to an anchor; scale_ratio must be positive to decode."""

    dx: float
    dy: float
    scale_ratio: float
    pitch: float
    yaw: float
    roll: float

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.scale_ratio,
                         self.pitch, self.yaw, self.roll], dtype=float)

    @classmethod
    def from_array(cls, a) -> "RelPose":
        a = np.asarray(a, dtype=float).reshape(6)
        return cls(dx=float(a[0]), dy=float(a[1]), scale_ratio=float(a[2]),
                   pitch=float(a[3]), yaw=float(a[4]), roll=float(a[5]))


def encode_rel(pose: Pose6, anchor) -> RelPose:
    """Encode a pose relative to an anchor ``(x0, y0, s0)`` with ``s0 > 0``."""
    x0, y0, s0 = (float(v) for v in anchor)
    if s0 <= 0.0:
        raise ValueError("anchor scale must be positive")
    r = pose.rpy()
    return RelPose(dx=pose.u[0] / s0 - x0, dy=pose.u[1] / s0 - y0,
                   scale_ratio=pose.s / s0, pitch=r.pitch, yaw=r.yaw, roll=r.roll)


def decode_rel(rel: RelPose, anchor) -> Pose6:
    """Invert :func:`encode_rel`; requires a positive predicted scale ratio."""
    x0, y0, s0 = (float(v) for v in anchor)
    if s0 <= 0.0:
        raise ValueError("anchor scale must be positive")
    if rel.scale_ratio <= 0.0:
        raise ValueError(f"scale ratio {rel.scale_ratio} is not positive")
    u = np.array([s0 * (rel.dx + x0), s0 * (rel.dy + y0)])
    A = rpy_to_rotation(Rpy(roll=rel.roll, pitch=rel.pitch, yaw=rel.yaw))
    return Pose6(u=u, s=s0 * rel.scale_ratio, A=A)


@dataclass
class PoseRegressor:
    """Per-bin 6-vector coefficients ``(M, n_bins, 6)`` with an active-feature mask."""

    keypoint_type: str
    bin_edges: np.ndarray   # (M, n_bins + 1)
    coeffs: np.ndarray      # (M, n_bins, 6)
    active: np.ndarray      # (M,) bool
    r2: np.ndarray | None = None       # training R^2 per output dimension
    loss_trace: np.ndarray | None = None

    def __post_init__(self):
        self.bin_edges = np.asarray(self.bin_edges, dtype=float)
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        self.active = np.asarray(self.active, dtype=bool)
        if np.any(np.diff(self.bin_edges, axis=1) <= 0):
            raise ValueError("bin edges must be strictly increasing per feature")
        if self.coeffs.shape != (self.bin_edges.shape[0], self.bin_edges.shape[1] - 1, 6):
            raise ValueError(f"coefficient tensor has shape {self.coeffs.shape}")

    @property
    def n_features(self) -> int:
        return self.coeffs.shape[0]

    @property
    def active_indices(self) -> np.ndarray:
        return np.flatnonzero(self.active)

    def predict(self, x: np.ndarray) -> RelPose:
        return RelPose.from_array(self.predict_batch(np.asarray(x, dtype=float)[None, :])[0])

    def predict_batch(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"feature matrix must be (n, {self.n_features}), got {X.shape}")
        ai = self.active_indices
        if ai.size == 0:
            return np.zeros((X.shape[0], 6))
        bins = _feature_bins(self.bin_edges, X, ai)
        return self.coeffs[ai[:, None], bins, :].sum(axis=0)

    def to_dict(self) -> dict:
        ai = self.active_indices
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "pose_regressor",
            "keypoint_type": self.keypoint_type,
            "n_features": int(self.n_features),
            "n_bins": int(self.coeffs.shape[1]),
            "bin_edges": self.bin_edges.tolist(),
            "active": ai.tolist(),
            "coeffs": self.coeffs[ai].tolist(),
            "r2": self.r2.tolist() if self.r2 is not None else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PoseRegressor":
        M = int(d["n_features"])
        nb = int(d["n_bins"])
        ai = np.asarray(d["active"], dtype=int)
        coeffs = np.zeros((M, nb, 6))
        if ai.size:
            coeffs[ai] = np.asarray(d["coeffs"], dtype=float)
        active = np.zeros(M, dtype=bool)
        active[ai] = True
        r2 = None if d.get("r2") is None else np.asarray(d["r2"], dtype=float)
        return cls(keypoint_type=d["keypoint_type"],
                   bin_edges=np.asarray(d["bin_edges"], dtype=float),
                   coeffs=coeffs, active=active, r2=r2)


def _feature_bins(edges: np.ndarray, X: np.ndarray, ai: np.ndarray) -> np.ndarray:
    out = np.empty((ai.size, X.shape[0]), dtype=int)
    for row, i in enumerate(ai):
        out[row] = bin_index(edges[i], X[:, i])
    return out


def predict_rel(regressor, x: np.ndarray) -> RelPose:
    """Predict a relative pose; duck-typed so oracle stubs can stand in."""
    return regressor.predict(x)


def make_bin_edges(X: np.ndarray, n_bins: int = N_BINS) -> np.ndarray:
    """Equal-width per-feature edges over the training range."""
    lo = X.min(axis=0)
    hi = X.max(axis=0)
    flat = hi - lo < 1e-12
    lo = np.where(flat, lo - 0.5, lo)
    hi = np.where(flat, hi + 0.5, hi)
    return np.linspace(lo, hi, n_bins + 1).T


def train_pose_regressor(
    features: np.ndarray,
    targets: np.ndarray,
    m: int,
    epochs: int = 20,
    *,
    keypoint_type: str = "",
    n_bins: int = N_BINS,
    learning_rate: float = 0.1,
    momentum: float = 0.9,
    batch_size: int = 32,
    refine_epochs: int = 0,
    seed: int = 0,
) -> PoseRegressor:
    """Fit the additive binned regressor by SGD with feature annealing.

    Features are removed on a linear schedule (lowest coefficient-block
    norm first) across ``epochs`` so exactly ``m`` survive, then training
    continues for ``refine_epochs`` more passes on the survivors.  The
    batch gradient is diagonally preconditioned: each bin's entry is the
    mean residual of the batch examples falling in it, damped by the
    active-feature count.  This keeps the step size meaningful regardless
    of bin occupancy or feature pool size (stable for learning rates
    below ~0.2 at momentum 0.9).
    """
    X = np.asarray(features, dtype=float)
    Y = np.asarray(targets, dtype=float)
    if X.ndim != 2 or Y.shape != (X.shape[0], 6):
        raise ValueError(f"need (n, M) features and (n, 6) targets, got {X.shape}, {Y.shape}")
    n, M = X.shape
    if not 0 < m <= M:
        raise ValueError("m must be in 1..M")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")

    edges = make_bin_edges(X, n_bins)
    reg = PoseRegressor(keypoint_type=keypoint_type, bin_edges=edges,
                        coeffs=np.zeros((M, n_bins, 6)), active=np.ones(M, dtype=bool))
    all_bins = _feature_bins(edges, X, np.arange(M))  # (M, n) fixed for the run

    total = M - m
    base, extra = divmod(total, epochs)
    removals = [base + 1] * extra + [base] * (epochs - extra)

    rng = np.random.default_rng(seed)
    velocity = np.zeros_like(reg.coeffs)
    trace = [float(np.sum((reg.predict_batch(X) - Y) ** 2))]

    for epoch in range(epochs + refine_epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            ai = reg.active_indices
            bins = all_bins[ai][:, idx]                       # (na, nb)
            preds = reg.coeffs[ai[:, None], bins, :].sum(axis=0)
            resid = preds - Y[idx]                            # (nb, 6)
            rows = np.broadcast_to(ai[:, None], bins.shape)
            G = np.zeros_like(reg.coeffs)
            np.add.at(G, (rows, bins), np.broadcast_to(resid[None, :, :], bins.shape + (6,)))
            occupancy = np.zeros(reg.coeffs.shape[:2])
            np.add.at(occupancy, (rows, bins), 1.0)
            G /= np.maximum(occupancy, 1.0)[:, :, None] * max(1, ai.size)
            velocity *= momentum
            velocity -= learning_rate * G
            reg.coeffs += velocity

        loss = float(np.sum((reg.predict_batch(X) - Y) ** 2))
        if not np.isfinite(loss):
            raise TrainingDivergedError(
                f"regression loss non-finite at epoch {epoch + 1}")
        trace.append(loss)

        if epoch < epochs and removals[epoch] > 0:
            norms = np.sqrt(np.sum(reg.coeffs.reshape(M, -1) ** 2, axis=1))
            cand = reg.active_indices
            order_rm = cand[np.lexsort((cand, norms[cand]))]
            drop = order_rm[:removals[epoch]]
            reg.active[drop] = False
            reg.coeffs[drop] = 0.0
            velocity[drop] = 0.0

    reg.r2 = _r2(reg.predict_batch(X), Y)
    reg.loss_trace = np.asarray(trace)
    return reg


def _r2(pred: np.ndarray, Y: np.ndarray) -> np.ndarray:
    ss_res = np.sum((pred - Y) ** 2, axis=0)
    ss_tot = np.sum((Y - Y.mean(axis=0)) ** 2, axis=0)
    # A per-dimension variance at float-noise level counts as a constant
    # target: fully explained iff the residual is at noise level too.
    scale = len(Y) * (np.abs(Y).max(axis=0) + 1.0) ** 2
    zero_var = ss_tot <= 1e-18 * scale
    r2 = 1.0 - ss_res / np.where(zero_var, 1.0, ss_tot)
    return np.where(zero_var, (ss_res <= 1e-12 * scale).astype(float), r2)


def r_squared(reg: PoseRegressor, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Per-dimension fraction of target variance explained on a dataset."""
    return _r2(reg.predict_batch(np.asarray(X, dtype=float)), np.asarray(Y, dtype=float))


def save_regressors(regressors: dict, path) -> None:
    payload = {
        "schema_version": SCHEMA_VERSION,
        "kind": "pose_regressors",
        "regressors": {t: r.to_dict() for t, r in sorted(regressors.items())},
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def load_regressors(path) -> dict:
    with open(path) as f:
        payload = json.load(f)
    return {t: PoseRegressor.from_dict(d) for t, d in payload["regressors"].items()}
