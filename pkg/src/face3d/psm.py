"""Parameter-sensitive scoring models.

A parameter-sensitive model scores a feature vector x at a 1D parameter
theta (here: the yaw angle).  Theta's range is cut into equal bins and
the weights are piecewise constant across bins:

* linear kind: score = sum_i w[i, bin(theta)] * x[i]
* nonlinear kind: score = sum_i w[i, bin_i(x[i]), bin(theta)]

Training minimizes a robust cost over overlap-weighted positives and
negatives plus smoothness priors on the bin weights, using stochastic
gradient descent with momentum batched per image, interleaved with a
linear feature-removal schedule (feature selection with annealing).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from .errors import TrainingDivergedError
from .geometry import Box2

SCHEMA_VERSION = 1

LINEAR = "linear"
NONLINEAR = "nonlinear"

DEFAULT_THETA_BINS = {LINEAR: 16, NONLINEAR: 9}
THETA_RANGE = (-math.pi / 2, math.pi / 2)


def lorenz_loss(x):
    """Robust margin loss: ln(1 + (x-1)^2) below margin 1, zero above."""
    x = np.asarray(x, dtype=float)
    out = np.where(x < 1.0, np.log1p((x - 1.0) ** 2), 0.0)
    return out if out.ndim else float(out)


def lorenz_loss_deriv(x):
    """Derivative of :func:`lorenz_loss`; continuous (both sides 0) at x = 1."""
    x = np.asarray(x, dtype=float)
    d = x - 1.0
    out = np.where(x < 1.0, 2.0 * d / (1.0 + d * d), 0.0)
    return out if out.ndim else float(out)


def logistic_loss(x):
    x = np.asarray(x, dtype=float)
    out = np.logaddexp(0.0, -x)
    return out if out.ndim else float(out)


def logistic_loss_deriv(x):
    x = np.asarray(x, dtype=float)
    out = -1.0 / (1.0 + np.exp(x))
    return out if out.ndim else float(out)


_LOSSES = {
    "lorenz": (lorenz_loss, lorenz_loss_deriv),
    "logistic": (logistic_loss, logistic_loss_deriv),
}


def bin_index(edges: np.ndarray, values):
    """Bin of each value under half-open bins; out-of-range clamps to end bins."""
    idx = np.searchsorted(edges, values, side="right") - 1
    return np.clip(idx, 0, len(edges) - 2)


@dataclass
class PsmTrainConfig:
    kind: str = LINEAR
    n_theta_bins: int | None = None  # default 16 linear / 9 nonlinear
    n_x_bins: int = 8
    theta_range: tuple[float, float] = THETA_RANGE
    prior_l2: float = 1e-4          # s: ridge on every weight
    prior_theta_curv: float = 1e-2  # c: curvature across theta bins
    prior_x_curv: float = 1e-2      # d: curvature across x bins (nonlinear)
    negative_weight: float = 1.0    # mu
    momentum: float = 0.9
    learning_rate: float = 1e-2
    start_features: int | None = None  # defaults to the data's feature count
    end_features: int | None = None    # defaults to start (no removal)
    epochs: int = 20
    loss: str = "lorenz"

    def __post_init__(self):
        if self.kind not in (LINEAR, NONLINEAR):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.loss not in _LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if (self.start_features is not None and self.end_features is not None
                and self.end_features > self.start_features):
            raise ValueError("end_features must be <= start_features")

    def theta_bins(self) -> int:
        return self.n_theta_bins if self.n_theta_bins is not None else DEFAULT_THETA_BINS[self.kind]


@dataclass(frozen=True)
class TrainExample:
    """One scored box: features, its parameter value, and ground-truth overlaps."""

    features: np.ndarray
    theta: float
    image_id: str
    overlaps: dict  # ground-truth face key -> overlap in [0, 1]
    box: Box2 | None = None

    def __post_init__(self):
        object.__setattr__(self, "features", np.asarray(self.features, dtype=float))
        for key, o in self.overlaps.items():
            if not 0.0 <= o <= 1.0:
                raise ValueError(f"overlap {o} for face {key!r} outside [0, 1]")

    @property
    def max_overlap(self) -> float:
        return max(self.overlaps.values(), default=0.0)


@dataclass
class PsmWeights:
    """Bin-discretized weight matrix plus the binning that interprets it.

    ``weights`` is ``(M, B_theta)`` for the linear kind and
    ``(M, B_x, B_theta)`` for the nonlinear kind; rows of removed features
    are zero and masked out of ``active``.
    """

    kind: str
    theta_edges: np.ndarray
    weights: np.ndarray
    active: np.ndarray
    x_edges: np.ndarray | None = None
    config: PsmTrainConfig | None = None
    cost_trace: np.ndarray | None = None

    def __post_init__(self):
        self.theta_edges = np.asarray(self.theta_edges, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        self.active = np.asarray(self.active, dtype=bool)
        if np.any(np.diff(self.theta_edges) <= 0):
            raise ValueError("theta bin edges must be strictly increasing")
        if self.kind == NONLINEAR:
            if self.x_edges is None:
                raise ValueError("nonlinear model needs per-feature x bin edges")
            self.x_edges = np.asarray(self.x_edges, dtype=float)
            if np.any(np.diff(self.x_edges, axis=1) <= 0):
                raise ValueError("x bin edges must be strictly increasing")

    @property
    def n_features(self) -> int:
        return self.weights.shape[0]

    @property
    def n_theta_bins(self) -> int:
        return len(self.theta_edges) - 1

    @property
    def active_indices(self) -> np.ndarray:
        return np.flatnonzero(self.active)

    def theta_bin(self, theta) -> np.ndarray:
        return bin_index(self.theta_edges, theta)

    def score(self, x: np.ndarray, theta: float) -> float:
        return float(self.score_batch(np.asarray(x, dtype=float)[None, :],
                                      np.array([theta]))[0])

    def score_batch(self, X: np.ndarray, thetas: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(
                f"feature matrix must be (n, {self.n_features}), got {X.shape}")
        k = self.theta_bin(np.asarray(thetas, dtype=float))
        ai = self.active_indices
        if ai.size == 0:
            return np.zeros(X.shape[0])
        if self.kind == LINEAR:
            wk = self.weights[ai][:, k]           # (na, n)
            return np.einsum("ni,in->n", X[:, ai], wk)
        xbins = _x_bins(self.x_edges, X, ai)      # (na, n)
        return self.weights[ai[:, None], xbins, k[None, :]].sum(axis=0)

    def to_dict(self) -> dict:
        ai = self.active_indices
        d = {
            "schema_version": SCHEMA_VERSION,
            "kind": "psm_weights",
            "model_kind": self.kind,
            "n_features": int(self.n_features),
            "theta_edges": self.theta_edges.tolist(),
            "active": ai.tolist(),
            "blocks": self.weights[ai].tolist(),
            "x_edges": self.x_edges.tolist() if self.x_edges is not None else None,
            "config": asdict(self.config) if self.config is not None else None,
            "cost_trace": self.cost_trace.tolist() if self.cost_trace is not None else None,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PsmWeights":
        kind = d["model_kind"]
        M = int(d["n_features"])
        theta_edges = np.asarray(d["theta_edges"], dtype=float)
        ai = np.asarray(d["active"], dtype=int)
        blocks = np.asarray(d["blocks"], dtype=float)
        shape = (M, len(theta_edges) - 1) if kind == LINEAR else (M,) + blocks.shape[1:]
        weights = np.zeros(shape)
        if ai.size:
            weights[ai] = blocks
        active = np.zeros(M, dtype=bool)
        active[ai] = True
        x_edges = None if d.get("x_edges") is None else np.asarray(d["x_edges"], dtype=float)
        cfg = None
        if d.get("config"):
            c = dict(d["config"])
            c["theta_range"] = tuple(c["theta_range"])
            cfg = PsmTrainConfig(**c)
        trace = None if d.get("cost_trace") is None else np.asarray(d["cost_trace"], dtype=float)
        return cls(kind=kind, theta_edges=theta_edges, weights=weights,
                   active=active, x_edges=x_edges, config=cfg, cost_trace=trace)

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "PsmWeights":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def _x_bins(x_edges: np.ndarray, X: np.ndarray, ai: np.ndarray) -> np.ndarray:
    """Per-feature bins for the active columns of X; (na, n) int array."""
    nb = x_edges.shape[1] - 1
    out = np.empty((ai.size, X.shape[0]), dtype=int)
    for row, i in enumerate(ai):
        out[row] = bin_index(x_edges[i], X[:, i])
    return out


def score_linear(weights: PsmWeights, x: np.ndarray, theta: float) -> float:
    if weights.kind != LINEAR:
        raise ValueError("expected a linear model")
    return weights.score(x, theta)


def score_nonlinear(weights: PsmWeights, x: np.ndarray, theta: float) -> float:
    if weights.kind != NONLINEAR:
        raise ValueError("expected a nonlinear model")
    return weights.score(x, theta)


def prior_penalty(block: np.ndarray, config: PsmTrainConfig) -> float:
    """Smoothness prior for one feature's weight block.

    Linear blocks pay a ridge plus squared second differences across the
    theta bins; nonlinear blocks additionally pay curvature across the
    x bins (rows are x bins, columns theta bins).
    """
    w = np.asarray(block, dtype=float)
    total = config.prior_l2 * float(np.sum(w * w))
    if config.kind == LINEAR:
        if w.ndim != 1:
            raise ValueError("linear block must be a vector")
        if len(w) >= 3:
            t = w[2:] + w[:-2] - 2.0 * w[1:-1]
            total += config.prior_theta_curv * float(np.sum(t * t))
        return total
    if w.ndim != 2:
        raise ValueError("nonlinear block must be a (B_x, B_theta) matrix")
    if w.shape[1] >= 3:
        t = w[:, 2:] + w[:, :-2] - 2.0 * w[:, 1:-1]
        total += config.prior_theta_curv * float(np.sum(t * t))
    if w.shape[0] >= 3:
        t = w[2:, :] + w[:-2, :] - 2.0 * w[1:-1, :]
        total += config.prior_x_curv * float(np.sum(t * t))
    return total


def _prior_total(weights: np.ndarray, active: np.ndarray, config: PsmTrainConfig) -> float:
    W = weights[active]
    total = config.prior_l2 * float(np.sum(W * W))
    if config.kind == LINEAR:
        if W.shape[1] >= 3:
            t = W[:, 2:] + W[:, :-2] - 2.0 * W[:, 1:-1]
            total += config.prior_theta_curv * float(np.sum(t * t))
        return total
    if W.shape[2] >= 3:
        t = W[:, :, 2:] + W[:, :, :-2] - 2.0 * W[:, :, 1:-1]
        total += config.prior_theta_curv * float(np.sum(t * t))
    if W.shape[1] >= 3:
        t = W[:, 2:, :] + W[:, :-2, :] - 2.0 * W[:, 1:-1, :]
        total += config.prior_x_curv * float(np.sum(t * t))
    return total


def _prior_gradient(weights: np.ndarray, active: np.ndarray, config: PsmTrainConfig) -> np.ndarray:
    G = np.zeros_like(weights)
    W = weights[active]
    g = 2.0 * config.prior_l2 * W
    if config.kind == LINEAR:
        if W.shape[1] >= 3:
            t = W[:, 2:] + W[:, :-2] - 2.0 * W[:, 1:-1]
            g[:, 2:] += 2.0 * config.prior_theta_curv * t
            g[:, :-2] += 2.0 * config.prior_theta_curv * t
            g[:, 1:-1] -= 4.0 * config.prior_theta_curv * t
    else:
        if W.shape[2] >= 3:
            t = W[:, :, 2:] + W[:, :, :-2] - 2.0 * W[:, :, 1:-1]
            g[:, :, 2:] += 2.0 * config.prior_theta_curv * t
            g[:, :, :-2] += 2.0 * config.prior_theta_curv * t
            g[:, :, 1:-1] -= 4.0 * config.prior_theta_curv * t
        if W.shape[1] >= 3:
            t = W[:, 2:, :] + W[:, :-2, :] - 2.0 * W[:, 1:-1, :]
            g[:, 2:, :] += 2.0 * config.prior_x_curv * t
            g[:, :-2, :] += 2.0 * config.prior_x_curv * t
            g[:, 1:-1, :] -= 4.0 * config.prior_x_curv * t
    G[active] = g
    return G


def positive_face_weights(data) -> dict:
    """Per-face normalized positive weights: for each ground-truth face,
    the (2*o - 1)/s weights of its overlapping examples, which sum to 1."""
    totals: dict = {}
    for ex in data:
        for face, o in ex.overlaps.items():
            if o > 0.5:
                totals[face] = totals.get(face, 0.0) + (2.0 * o - 1.0)
    out: dict = {face: [] for face in totals}
    for i, ex in enumerate(data):
        for face, o in ex.overlaps.items():
            if o > 0.5:
                out[face].append((i, (2.0 * o - 1.0) / totals[face]))
    return out


def _example_coefficients(data, config: PsmTrainConfig):
    """Aggregate positive weight and negative flag for every example.

    An example may support several ground-truth faces; its loss term is
    then counted once per face with the per-face normalized weight.
    Examples with max overlap in [0.3, 0.5] contribute nothing.
    """
    totals: dict = {}
    seen: set = set()
    for ex in data:
        for face, o in ex.overlaps.items():
            seen.add(face)
            if o > 0.5:
                totals[face] = totals.get(face, 0.0) + (2.0 * o - 1.0)

    coef_pos = np.zeros(len(data))
    n_pos_terms = np.zeros(len(data), dtype=int)
    is_neg = np.zeros(len(data), dtype=bool)
    for i, ex in enumerate(data):
        for face, o in ex.overlaps.items():
            if o > 0.5:
                coef_pos[i] += (2.0 * o - 1.0) / totals[face]
                n_pos_terms[i] += 1
        if ex.max_overlap < 0.3:
            is_neg[i] = True

    orphaned = sorted(seen - set(totals))
    if orphaned:
        warnings.warn(f"ground-truth faces with no positive example: {orphaned}")
    return coef_pos, n_pos_terms, is_neg


def training_cost(weights: PsmWeights, data, config: PsmTrainConfig) -> float:
    """Overlap-weighted positive losses + negative losses + priors."""
    loss, _ = _LOSSES[config.loss]
    X = np.stack([ex.features for ex in data])
    thetas = np.array([ex.theta for ex in data])
    scores = weights.score_batch(X, thetas)
    coef_pos, _, is_neg = _example_coefficients(data, config)
    total = float(np.sum(coef_pos * loss(scores)))
    total += config.negative_weight * float(np.sum(loss(-scores[is_neg])))
    total += _prior_total(weights.weights, weights.active, config)
    return total


def training_cost_gradient(weights: PsmWeights, data, config: PsmTrainConfig) -> np.ndarray:
    """Analytic gradient of :func:`training_cost` w.r.t. the weight array."""
    coef_pos, _, is_neg = _example_coefficients(data, config)
    X = np.stack([ex.features for ex in data])
    thetas = np.array([ex.theta for ex in data])
    G = _data_gradient(weights, X, thetas, coef_pos, is_neg, config)
    G += _prior_gradient(weights.weights, weights.active, config)
    return G


def _data_gradient(weights: PsmWeights, X, thetas, coef_pos, is_neg,
                   config: PsmTrainConfig) -> np.ndarray:
    _, dloss = _LOSSES[config.loss]
    scores = weights.score_batch(X, thetas)
    # d/ds of [coef * L(s) + mu * L(-s)] per example
    a = coef_pos * dloss(scores)
    a -= config.negative_weight * is_neg * dloss(-scores)
    k = weights.theta_bin(thetas)
    ai = weights.active_indices
    G = np.zeros_like(weights.weights)
    if ai.size == 0:
        return G
    AI = np.broadcast_to(ai[:, None], (ai.size, len(thetas)))
    KK = np.broadcast_to(k[None, :], (ai.size, len(thetas)))
    if weights.kind == LINEAR:
        np.add.at(G, (AI, KK), X[:, ai].T * a[None, :])
    else:
        xbins = _x_bins(weights.x_edges, X, ai)
        np.add.at(G, (AI, xbins, KK), np.broadcast_to(a[None, :], xbins.shape))
    return G


def _removal_schedule(start: int, end: int, epochs: int) -> list[int]:
    """Per-epoch removal counts: equal when divisible, front-loaded otherwise."""
    total = start - end
    base, extra = divmod(total, epochs)
    return [base + 1] * extra + [base] * (epochs - extra)


def _block_norms(weights: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(weights.reshape(weights.shape[0], -1) ** 2, axis=1))


def make_x_edges(X: np.ndarray, n_bins: int) -> np.ndarray:
    """Equal-width per-feature bin edges over the training range."""
    lo = X.min(axis=0)
    hi = X.max(axis=0)
    flat = hi - lo < 1e-12
    lo = np.where(flat, lo - 0.5, lo)
    hi = np.where(flat, hi + 0.5, hi)
    return np.linspace(lo, hi, n_bins + 1).T


def train_psm(data, config: PsmTrainConfig, seed: int = 0) -> PsmWeights:
    """Feature selection with annealing on the parameter-sensitive cost.

    Each epoch runs one pass of momentum SGD where a batch holds all the
    examples of one image (the data gradient is normalized by the batch's
    loss-term count, the prior gradient spread evenly across batches),
    then removes the lowest-importance features (block norm) on a linear
    schedule so exactly ``end_features`` survive after the last epoch.
    The returned weights carry the per-epoch cost trace.
    """
    data = list(data)
    if not data:
        raise ValueError("no training examples")
    M = len(data[0].features)
    for ex in data:
        if len(ex.features) != M:
            raise ValueError("inconsistent feature dimensions")

    coef_pos, n_pos_terms, is_neg = _example_coefficients(data, config)
    if not np.any(coef_pos > 0.0):
        raise ValueError("training data has no positive examples")
    if not np.any(is_neg):
        raise ValueError("training data has no negative examples")

    start = config.start_features if config.start_features is not None else M
    if start != M:
        raise ValueError(f"start_features={start} but data has {M} features")
    end = config.end_features if config.end_features is not None else start
    if not 0 < end <= start:
        raise ValueError("end_features must be in 1..start_features")
    removals = _removal_schedule(start, end, config.epochs)

    B = config.theta_bins()
    theta_edges = np.linspace(config.theta_range[0], config.theta_range[1], B + 1)
    X = np.stack([ex.features for ex in data])
    thetas = np.array([ex.theta for ex in data])
    x_edges = make_x_edges(X, config.n_x_bins) if config.kind == NONLINEAR else None
    shape = (M, B) if config.kind == LINEAR else (M, config.n_x_bins, B)

    weights = PsmWeights(kind=config.kind, theta_edges=theta_edges,
                         weights=np.zeros(shape), active=np.ones(M, dtype=bool),
                         x_edges=x_edges, config=config)

    images = sorted({ex.image_id for ex in data})
    by_image = {img: np.array([i for i, ex in enumerate(data) if ex.image_id == img])
                for img in images}
    n_images = len(images)

    rng = np.random.default_rng(seed)
    velocity = np.zeros(shape)
    trace = [training_cost(weights, data, config)]

    for epoch in range(config.epochs):
        for img_pos in rng.permutation(n_images):
            idx = by_image[images[img_pos]]
            n_terms = int(n_pos_terms[idx].sum() + is_neg[idx].sum())
            G = _prior_gradient(weights.weights, weights.active, config) / n_images
            if n_terms > 0:
                G += _data_gradient(weights, X[idx], thetas[idx], coef_pos[idx],
                                    is_neg[idx], config) / n_terms
            velocity *= config.momentum
            velocity -= config.learning_rate * G
            weights.weights += velocity

        cost = training_cost(weights, data, config)
        if not np.isfinite(cost):
            raise TrainingDivergedError(
                f"cost became non-finite at epoch {epoch + 1}; lower the learning rate")
        trace.append(cost)

        if removals[epoch] > 0:
            norms = _block_norms(weights.weights)
            cand = weights.active_indices
            order = cand[np.lexsort((cand, norms[cand]))]
            drop = order[:removals[epoch]]
            weights.active[drop] = False
            weights.weights[drop] = 0.0
            velocity[drop] = 0.0

    weights.cost_trace = np.asarray(trace)
    return weights


def total_variation_ranking(weights: PsmWeights, top: int = 50) -> list[tuple[int, float]]:
    """Features ranked by total variation of their weights across theta bins.

    Diagnostic export: large total variation marks features whose effect
    depends strongly on the parameter.
    """
    tvs = []
    for i in weights.active_indices:
        w = weights.weights[i]
        if weights.kind == LINEAR:
            tv = float(np.sum(np.abs(np.diff(w))))
        else:
            tv = float(np.sum(np.abs(np.diff(w, axis=1))))
        tvs.append((int(i), tv))
    tvs.sort(key=lambda p: (-p[1], p[0]))
    return tvs[:top]
