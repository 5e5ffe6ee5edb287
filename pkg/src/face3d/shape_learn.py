"""Learning a rigid 3D keypoint model from 2D annotations.

Given many faces annotated with the same set of 2D keypoints, the shape
matrix is recovered by alternating two exact steps: fit each face's
projected rigid pose against the current shape, then re-solve the shape
by linear least squares with the poses held fixed.  The overall energy

    sum_i || u_i + s_i * project(A_i @ F) - P_i ||^2

is non-increasing across both half-steps.  The recovered shape is only
determined up to a similarity transform plus a depth flip, so the result
is canonicalized: columns centered, Frobenius norm 1, and mean nose depth
made positive (flipping depth also conjugates every pose rotation, which
leaves all projections unchanged).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import AnnotationFormatError, DegenerateConfigurationError
from .geometry import Pose6, apply_pose, project
from .rigid_fit import fit_rigid_projection, fit_rigid_projection_batch

KEYPOINT_NAMES = (
    "eye_left",
    "eye_right",
    "nose_left",
    "nose_right",
    "mouth_left",
    "mouth_right",
    "ear_left",
    "ear_right",
    "chin",
)
FACE_CENTER = "face_center"
EYE_LEFT, EYE_RIGHT = 0, 1

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ShapeModel:
    """Rigid 3 x L keypoint matrix with named columns."""

    points: np.ndarray
    keypoint_names: tuple[str, ...]

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[0] != 3:
            raise ValueError(f"shape matrix must be 3 x L, got {pts.shape}")
        if pts.shape[1] != len(self.keypoint_names):
            raise ValueError("keypoint name count must match column count")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "keypoint_names", tuple(self.keypoint_names))

    @property
    def n_points(self) -> int:
        return self.points.shape[1]

    def index_of(self, name: str) -> int:
        return self.keypoint_names.index(name)

    def eye_distance(self) -> float:
        """3D distance between the eye keypoints, in model units."""
        d = self.points[:, EYE_LEFT] - self.points[:, EYE_RIGHT]
        return float(np.linalg.norm(d))

    def canonicalized(self) -> "ShapeModel":
        pts, _ = canonicalize_shape(self.points, self.keypoint_names)
        return ShapeModel(points=pts, keypoint_names=self.keypoint_names)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "shape_model",
            "keypoint_names": list(self.keypoint_names),
            "points": self.points.tolist(),
            "normalization": {
                "centered": bool(np.abs(self.points.mean(axis=1)).max() < 1e-9),
                "frobenius_norm": float(np.linalg.norm(self.points)),
                "sign": "nose_z_positive",
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ShapeModel":
        return cls(points=np.asarray(d["points"], dtype=float),
                   keypoint_names=tuple(d["keypoint_names"]))

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "ShapeModel":
        with open(path) as f:
            return cls.from_dict(json.load(f))


@dataclass(frozen=True)
class FaceAnnotation:
    face_id: str
    points: np.ndarray  # (2, L)
    visible: np.ndarray  # (L,) bool

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        vis = np.asarray(self.visible, dtype=bool)
        if pts.ndim != 2 or pts.shape[0] != 2 or vis.shape != (pts.shape[1],):
            raise ValueError("annotation points must be 2 x L with L visibility flags")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "visible", vis)

    @property
    def n_visible(self) -> int:
        return int(self.visible.sum())


@dataclass(frozen=True)
class AnnotationSet:
    keypoint_names: tuple[str, ...]
    faces: tuple[FaceAnnotation, ...]

    def __post_init__(self):
        object.__setattr__(self, "keypoint_names", tuple(self.keypoint_names))
        object.__setattr__(self, "faces", tuple(self.faces))
        L = len(self.keypoint_names)
        for face in self.faces:
            if face.points.shape[1] != L:
                raise ValueError(f"face {face.face_id}: expected {L} keypoints")
            if face.n_visible < 4:
                raise ValueError(f"face {face.face_id}: needs >= 4 visible keypoints")

    @classmethod
    def from_csv(cls, path, keypoint_names: tuple[str, ...] | None = None) -> "AnnotationSet":
        """Read rows of ``face_id,keypoint_name,x,y,visible``.

        Keypoints absent from a face are marked invisible.  Raises
        :class:`AnnotationFormatError` naming the offending line.
        """
        rows = []
        with open(path, newline="") as f:
            reader = csv.reader(f)
            for lineno, row in enumerate(reader, start=1):
                if not row or all(not c.strip() for c in row):
                    continue
                if lineno == 1 and row[0].strip().lower() == "face_id":
                    continue
                if len(row) != 5:
                    raise AnnotationFormatError(lineno, f"expected 5 columns, got {len(row)}")
                face_id, name, xs, ys, vs = (c.strip() for c in row)
                try:
                    x, y = float(xs), float(ys)
                except ValueError:
                    raise AnnotationFormatError(lineno, f"bad coordinates {xs!r},{ys!r}") from None
                if vs.lower() in ("1", "true", "yes"):
                    vis = True
                elif vs.lower() in ("0", "false", "no"):
                    vis = False
                else:
                    raise AnnotationFormatError(lineno, f"bad visibility flag {vs!r}")
                rows.append((face_id, name, x, y, vis))

        if keypoint_names is None:
            seen = {name for _, name, _, _, _ in rows}
            canonical = [n for n in KEYPOINT_NAMES if n in seen]
            extra = sorted(seen - set(KEYPOINT_NAMES))
            keypoint_names = tuple(canonical + extra)
        name_idx = {n: i for i, n in enumerate(keypoint_names)}

        faces: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        order: list[str] = []
        for face_id, name, x, y, vis in rows:
            if name not in name_idx:
                continue
            if face_id not in faces:
                faces[face_id] = (np.zeros((2, len(keypoint_names))),
                                  np.zeros(len(keypoint_names), dtype=bool))
                order.append(face_id)
            pts, visible = faces[face_id]
            j = name_idx[name]
            pts[:, j] = (x, y)
            visible[j] = vis

        anns = [FaceAnnotation(fid, faces[fid][0], faces[fid][1]) for fid in order]
        return cls(keypoint_names=keypoint_names, faces=tuple(anns))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["face_id", "keypoint_name", "x", "y", "visible"])
            for face in self.faces:
                for j, name in enumerate(self.keypoint_names):
                    writer.writerow([face.face_id, name,
                                     repr(float(face.points[0, j])),
                                     repr(float(face.points[1, j])),
                                     int(face.visible[j])])


@dataclass(frozen=True)
class LearnShapeResult:
    shape: ShapeModel
    poses: tuple[Pose6, ...]
    energy_trace: np.ndarray  # alternating pose-step / shape-step energies
    final_energy: float
    underdetermined: bool
    outer_iterations: int


def face_residuals(poses, shape_points: np.ndarray, ann: AnnotationSet) -> np.ndarray:
    """Per-face squared reprojection error over visible keypoints."""
    out = np.zeros(len(ann.faces))
    for i, (pose, face) in enumerate(zip(poses, ann.faces)):
        vis = face.visible
        pred = apply_pose(pose, shape_points[:, vis])
        out[i] = float(np.sum((pred - face.points[:, vis]) ** 2))
    return out


def projection_energy(poses, shape_points: np.ndarray, ann: AnnotationSet) -> float:
    """Total squared reprojection error over visible keypoints."""
    return float(face_residuals(poses, shape_points, ann).sum())


def _pose_rows(pose: Pose6) -> np.ndarray:
    """The 2 x 3 linear part of the projected transform (scale times top rows of A)."""
    return pose.s * pose.A[:2, :]


def _solve_shape(poses, ann: AnnotationSet):
    """Least-squares shape given fixed poses.

    Solves each keypoint's 3-vector from the stacked visible equations,
    using the minimum-norm solution when the system is rank deficient.
    Returns the shape and the worst rank across keypoints.
    """
    L = len(ann.keypoint_names)
    rows = [_pose_rows(pose) for pose in poses]
    F = np.zeros((3, L))
    min_rank = 3
    for j in range(L):
        blocks = []
        rhs = []
        for pose, T, face in zip(poses, rows, ann.faces):
            if not face.visible[j]:
                continue
            blocks.append(T)
            rhs.append(face.points[:, j] - pose.u)
        if not blocks:
            raise DegenerateConfigurationError(
                f"keypoint {ann.keypoint_names[j]} is never visible")
        A = np.vstack(blocks)
        b = np.concatenate(rhs)
        sol, _, rank, _ = np.linalg.lstsq(A, b, rcond=None)
        F[:, j] = sol
        min_rank = min(min_rank, int(rank))
    return F, min_rank


def shape_update_step(poses, ann: AnnotationSet) -> np.ndarray:
    """Exact shape minimizer for fixed poses; raises on a singular system."""
    if len(poses) < 2:
        raise DegenerateConfigurationError("need at least two poses")
    if len(poses) != len(ann.faces):
        raise ValueError("one pose per annotated face required")
    F, rank = _solve_shape(poses, ann)
    if rank < 3:
        raise DegenerateConfigurationError(
            "shape system is singular (poses do not constrain depth)")
    return F


def _nose_depth_sign(F: np.ndarray, keypoint_names) -> float:
    """Rotation-invariant depth orientation of the shape.

    Orthographic projection cannot distinguish a shape from its depth
    mirror (flipping z and conjugating every rotation), so the learned
    shape carries a two-fold ambiguity on top of the rotation gauge.
    This returns a signed quantity that flips under that mirror: the
    nose's offset along the normal of the eyes/chin plane when the face
    keypoints exist, otherwise the triple product of the first three
    centered keypoints.
    """
    names = list(keypoint_names)
    c = F.mean(axis=1)
    nose_cols = [i for i, n in enumerate(names) if "nose" in n]
    if nose_cols and {"eye_left", "eye_right", "chin"}.issubset(names):
        eye_axis = F[:, names.index("eye_right")] - F[:, names.index("eye_left")]
        chin = F[:, names.index("chin")] - c
        nose = F[:, nose_cols].mean(axis=1) - c
        return float(np.dot(nose, np.cross(eye_axis, chin)))
    if F.shape[1] >= 3:
        v = F[:, :3] - c[:, None]
        return float(np.linalg.det(v))
    return 1.0


def canonicalize_shape(points: np.ndarray, keypoint_names, poses=None):
    """Fix the similarity gauge: center, unit Frobenius norm, nose depth positive.

    The depth orientation is judged rotation-invariantly (nose on the
    positive side of the eyes/chin plane); a mirrored shape is flipped in
    z with every pose rotation conjugated, which leaves all projections
    unchanged.  When poses are supplied they are adjusted accordingly and
    returned alongside the shape.
    """
    F = np.asarray(points, dtype=float).copy()
    poses = list(poses) if poses is not None else None

    center = F.mean(axis=1)
    F -= center[:, None]
    if poses is not None:
        poses = [Pose6(u=p.u + p.s * project(p.A @ center), s=p.s, A=p.A) for p in poses]

    norm = float(np.linalg.norm(F))
    if norm <= 0.0:
        raise DegenerateConfigurationError("shape collapsed to a point")
    F /= norm
    if poses is not None:
        poses = [Pose6(u=p.u, s=p.s * norm, A=p.A) for p in poses]

    if _nose_depth_sign(F, keypoint_names) < 0.0:
        flip = np.diag([1.0, 1.0, -1.0])
        F = flip @ F
        if poses is not None:
            poses = [Pose6(u=p.u, s=p.s, A=flip @ p.A @ flip) for p in poses]

    return F, poses


def learn_shape(
    ann: AnnotationSet,
    n_outer: int = 100,
    seed: int = 0,
    n_pose_iter: int = 50,
    rel_tol: float = 1e-10,
    pose_tol: float = 1e-12,
) -> LearnShapeResult:
    """Alternate pose fitting and least-squares shape updates from a random start.

    The energy trace records both half-steps of every outer iteration and
    is monotone non-increasing.  A single annotated face (or any input
    that leaves depth unconstrained) yields an exact but underdetermined
    fit, flagged in the result; with two or more faces a singular shape
    system is an error instead.
    """
    if n_outer < 1:
        raise ValueError("n_outer must be >= 1")
    if not ann.faces:
        raise DegenerateConfigurationError("no annotated faces")

    rng = np.random.default_rng(seed)
    L = len(ann.keypoint_names)
    F = rng.standard_normal((3, L))

    # Faces sharing a visibility pattern are fitted in one vectorized batch;
    # the iterates match the per-face solver exactly.
    groups: dict[bytes, list[int]] = {}
    for i, face in enumerate(ann.faces):
        groups.setdefault(face.visible.tobytes(), []).append(i)

    trace: list[float] = []
    poses: list[Pose6] = [Pose6.identity()] * len(ann.faces)
    min_rank = 3
    prev_res: np.ndarray | None = None
    prev_energy = np.inf
    outer_done = 0
    for outer in range(n_outer):
        cur_res = np.zeros(len(ann.faces))
        for idxs in groups.values():
            vis = ann.faces[idxs[0]].visible
            Ps = np.stack([ann.faces[i].points[:, vis] for i in idxs])
            fitted, residuals = fit_rigid_projection_batch(
                F[:, vis], Ps, n_iter=n_pose_iter, tol=pose_tol)
            for i, pose, res in zip(idxs, fitted, residuals):
                # Monotone guard: the depth variables restart at zero each
                # refit, which can land marginally above the previous pose;
                # keep whichever explains the face better under current F.
                if prev_res is not None and res > prev_res[i]:
                    cur_res[i] = prev_res[i]
                else:
                    poses[i] = pose
                    cur_res[i] = res
        trace.append(float(cur_res.sum()))

        F, min_rank = _solve_shape(poses, ann)
        if len(ann.faces) >= 2 and min_rank < 3:
            raise DegenerateConfigurationError(
                "shape system is singular (all faces in an identical pose)")
        prev_res = face_residuals(poses, F, ann)
        shape_energy = float(prev_res.sum())
        trace.append(shape_energy)
        outer_done = outer + 1

        if np.isfinite(prev_energy) and prev_energy - shape_energy <= rel_tol * max(1.0, prev_energy):
            break
        prev_energy = shape_energy

    F, poses = canonicalize_shape(F, ann.keypoint_names, poses)
    final_energy = projection_energy(poses, F, ann)
    return LearnShapeResult(
        shape=ShapeModel(points=F, keypoint_names=ann.keypoint_names),
        poses=tuple(poses),
        energy_trace=np.asarray(trace),
        final_energy=final_energy,
        underdetermined=bool(len(ann.faces) < 2 or min_rank < 3),
        outer_iterations=outer_done,
    )
