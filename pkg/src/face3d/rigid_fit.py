"""Rigid point-set fitting.

Two solvers:

* :func:`fit_rigid` aligns two same-dimension point sets with a
  translation, a positive scale and a proper rotation, in closed form via
  SVD (Schonemann's extended orthogonal Procrustes solution).
* :func:`fit_rigid_projection` fits a projected rigid transform
  (scale + 3D rotation + 2D shift followed by orthographic projection)
  between a 3D model and 2D image points, by alternating the closed-form
  3D fit with an update of the hidden point depths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateConfigurationError
from .geometry import Pose6

RANK_TOL = 1e-10


@dataclass(frozen=True)
class RigidFitResult:
    """Row-convention similarity fit: predicted B is ``ones @ u.T + s * A @ R``."""

    u: np.ndarray
    s: float
    R: np.ndarray
    residual: float


@dataclass(frozen=True)
class ProjectedFitResult:
    pose: Pose6
    residual: float
    residual_trace: np.ndarray
    iterations: int


def fit_rigid(A: np.ndarray, B: np.ndarray) -> RigidFitResult:
    """Least-squares similarity alignment of point rows of A onto B.

    Minimizes ``||ones @ u.T + s * A @ R - B||_F^2`` over a translation
    ``u``, scale ``s > 0`` and proper rotation ``R`` (rotation acting on
    the right of row vectors).  Both inputs are ``(p, d)``.

    When the SVD solution comes out as a reflection, the singular vector
    of the smallest singular value is flipped so det(R) = +1; this matters
    for near-planar point clouds.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.ndim != 2 or A.shape != B.shape:
        raise ValueError(f"point sets must share shape, got {A.shape} vs {B.shape}")
    p, d = A.shape
    if p < 2:
        raise ValueError("need at least two points")

    a_mean = A.mean(axis=0)
    b_mean = B.mean(axis=0)
    A_c = A - a_mean
    B_c = B - b_mean

    # Rank of the centered source via its small Gram matrix: need at least
    # rank d-1 (planar is fine for d=3, collinear is not).
    gram_eigs = np.linalg.eigvalsh(A_c.T @ A_c)
    if gram_eigs[-1] <= 0.0 or (d >= 2 and gram_eigs[1] <= (RANK_TOL**2) * gram_eigs[-1]):
        raise DegenerateConfigurationError(
            "source points are rank deficient (all identical or collinear)"
        )

    M = A_c.T @ B_c
    U, _, Vt = np.linalg.svd(M)
    if np.linalg.det(U @ Vt) < 0.0:
        U = U.copy()
        U[:, -1] *= -1.0
    R = U @ Vt

    denom = float(gram_eigs.sum())
    s = float(np.sum(R * M)) / denom  # tr(R^T M) / tr(A_c^T A_c)
    if s <= 0.0:
        raise DegenerateConfigurationError(f"fitted scale {s} is not positive")

    u = b_mean - s * (a_mean @ R)
    residual = float(np.sum((u[None, :] + s * (A @ R) - B) ** 2))
    return RigidFitResult(u=u, s=s, R=R, residual=residual)


def fit_rigid_projection(
    F: np.ndarray,
    P: np.ndarray,
    n_iter: int = 50,
    tol: float = 1e-12,
) -> ProjectedFitResult:
    """Fit a projected rigid pose mapping 3D model points F onto 2D points P.

    ``F`` is ``(3, L)``, ``P`` is ``(2, L)`` with L >= 4 non-coplanar points
    recommended.  The unknown point depths start at zero and are refreshed
    each round from the current fit; the reported residual is the image-plane
    error ``||u + s * project(A @ F) - P||_F^2`` and its per-iteration trace
    is non-increasing in practice.
    """
    F = np.asarray(F, dtype=float)
    P = np.asarray(P, dtype=float)
    if F.ndim != 2 or F.shape[0] != 3:
        raise ValueError(f"model must be 3 x L, got {F.shape}")
    if P.shape != (2, F.shape[1]):
        raise ValueError(f"image points must be 2 x {F.shape[1]}, got {P.shape}")
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")

    L = F.shape[1]
    A = F.T  # (L, 3) rows of model points
    B = np.column_stack([P.T, np.zeros(L)])

    trace = []
    fit = None
    for _ in range(n_iter):
        fit = fit_rigid(A, B)
        C = fit.s * (A @ fit.R)
        pred_xy = fit.u[:2][None, :] + C[:, :2]
        residual = float(np.sum((pred_xy - P.T) ** 2))
        trace.append(residual)
        if len(trace) > 1 and trace[-2] - residual < tol:
            break
        B[:, 2] = C[:, 2]

    pose = Pose6(u=fit.u[:2], s=fit.s, A=fit.R.T)
    return ProjectedFitResult(
        pose=pose,
        residual=trace[-1],
        residual_trace=np.asarray(trace),
        iterations=len(trace),
    )


def fit_rigid_projection_batch(
    F: np.ndarray,
    Ps: np.ndarray,
    n_iter: int = 50,
    tol: float = 1e-12,
) -> tuple[list[Pose6], np.ndarray]:
    """Fit projected rigid poses for many point sets against one model.

    Runs the same iteration as :func:`fit_rigid_projection` for every
    face in ``Ps`` (shape ``(n, 2, L)``), vectorized with batched 3x3
    SVDs.  Each face exits early once its residual improvement drops
    below ``tol``.  Returns the fitted poses and final residuals.
    """
    F = np.asarray(F, dtype=float)
    Ps = np.asarray(Ps, dtype=float)
    if Ps.ndim != 3 or Ps.shape[1] != 2 or Ps.shape[2] != F.shape[1]:
        raise ValueError(f"expected (n, 2, {F.shape[1]}) point sets, got {Ps.shape}")
    n, _, L = Ps.shape
    if n == 0:
        return [], np.zeros(0)

    A = F.T  # (L, 3)
    a_mean = A.mean(axis=0)
    A_c = A - a_mean
    gram_eigs = np.linalg.eigvalsh(A_c.T @ A_c)
    if gram_eigs[-1] <= 0.0 or gram_eigs[1] <= (RANK_TOL**2) * gram_eigs[-1]:
        raise DegenerateConfigurationError(
            "model points are rank deficient (all identical or collinear)"
        )
    denom = float(gram_eigs.sum())

    P_rows = np.transpose(Ps, (0, 2, 1))  # (n, L, 2)
    B = np.concatenate([P_rows, np.zeros((n, L, 1))], axis=2)  # (n, L, 3)

    s_out = np.zeros(n)
    R_out = np.zeros((n, 3, 3))
    u_out = np.zeros((n, 3))
    res_out = np.full(n, np.inf)
    active = np.arange(n)

    for _ in range(n_iter):
        Ba = B[active]
        b_mean = Ba.mean(axis=1)  # (m, 3)
        B_c = Ba - b_mean[:, None, :]
        M = np.einsum("lk,mlj->mkj", A_c, B_c)  # (m, 3, 3)
        U, _, Vt = np.linalg.svd(M)
        flip = np.linalg.det(np.einsum("mik,mkj->mij", U, Vt)) < 0.0
        U[flip, :, -1] *= -1.0
        R = np.einsum("mik,mkj->mij", U, Vt)
        s = np.einsum("mij,mij->m", R, M) / denom
        if np.any(s <= 0.0):
            raise DegenerateConfigurationError("fitted scale is not positive")
        u = b_mean - s[:, None] * np.einsum("k,mkj->mj", a_mean, R)
        C = s[:, None, None] * np.einsum("lk,mkj->mlj", A, R)
        pred_xy = u[:, None, :2] + C[:, :, :2]
        res = np.sum((pred_xy - P_rows[active]) ** 2, axis=(1, 2))

        improved = res_out[active] - res
        s_out[active] = s
        R_out[active] = R
        u_out[active] = u
        res_out[active] = res

        keep = improved >= tol
        B[active, :, 2] = C[:, :, 2]
        active = active[keep]
        if active.size == 0:
            break

    poses = [Pose6(u=u_out[i, :2], s=s_out[i], A=R_out[i].T) for i in range(n)]
    return poses, res_out
