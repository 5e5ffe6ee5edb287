"""Seeded synthetic scenes and brute-force oracles.

Scenes plant ground-truth faces (random poses of the canonical shape),
derive noisy keypoint detections on a scale pyramid, and attach feature
vectors that are a fixed random linear embedding of each detection's
true relative pose, so pose regressors are learnable from scenes alone.
Everything is a pure function of the spec and its seeds.

The oracles here re-derive quantities the pipeline computes cleverly by
exhaustive or closed-form means: rotation-grid rigid fitting, subset
enumeration for suppression energies, overlap-matrix candidate metrics,
and Procrustes alignment for learned shapes.
"""

from __future__ import annotations

import functools
import itertools
import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .candidates import FaceCandidate, KeypointDetection, coherence_term
from .geometry import Box2, Pose6, Rpy, apply_pose, bounding_box, iou
from .pose_regression import RelPose, encode_rel
from .psm import TrainExample
from .shape_learn import FACE_CENTER, KEYPOINT_NAMES, ShapeModel, canonicalize_shape

SCHEMA_VERSION = 1

_BASE_FACE = np.array([
    [-0.50, -0.30, 0.10],   # eye_left
    [0.50, -0.30, 0.10],    # eye_right
    [-0.15, 0.10, 0.45],    # nose_left
    [0.15, 0.10, 0.45],     # nose_right
    [-0.30, 0.45, 0.20],    # mouth_left
    [0.30, 0.45, 0.20],     # mouth_right
    [-0.85, 0.10, -0.40],   # ear_left
    [0.85, 0.10, -0.40],    # ear_right
    [0.00, 0.85, 0.10],     # chin
]).T


@functools.lru_cache(maxsize=1)
def default_shape() -> ShapeModel:
    """Canonical 9-keypoint face: centered, unit Frobenius norm, nose forward."""
    pts, _ = canonicalize_shape(_BASE_FACE, KEYPOINT_NAMES)
    return ShapeModel(points=pts, keypoint_names=KEYPOINT_NAMES)


def pyramid_scales(image_size, per_octave: int = 4, min_size: int = 24) -> np.ndarray:
    """Geometric scale ladder 2**(k/per_octave) while the image stays big enough."""
    smallest = min(image_size)
    if smallest < min_size:
        return np.array([1.0])
    k_max = int(math.floor(per_octave * math.log2(smallest / min_size)))
    return 2.0 ** (np.arange(k_max + 1) / per_octave)


def frontal_extent(shape: ShapeModel) -> float:
    """Longer side of the frontal projection's bounding box, model units."""
    box = bounding_box(shape.points[:2])
    return float(max(box.hi - box.lo))


def face_octave(s: float, shape: ShapeModel, scales: np.ndarray,
                min_size: int = 24) -> float:
    """Pyramid scale whose detector window best matches a face of scale s."""
    target = s * frontal_extent(shape) / min_size
    idx = int(np.argmin(np.abs(np.log2(scales) - math.log2(max(target, 1e-12)))))
    return float(scales[idx])


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    image_size: tuple[int, int] = (480, 320)
    face_count: tuple[int, int] = (1, 4)
    yaw_range: tuple[float, float] = (-1.2, 1.2)
    pitch_range: tuple[float, float] = (-0.3, 0.3)
    roll_range: tuple[float, float] = (-0.3, 0.3)
    scale_range: tuple[float, float] = (45.0, 110.0)
    keypoint_noise: float = 0.0       # stddev as a fraction of the face's IED
    miss_prob: float = 0.0            # per-keypoint detection failure rate
    clutter_rate: float = 0.0         # expected false detections per scene
    feature_dim: int = 24
    feature_noise: float = 0.0
    feature_seed: int = 20240101      # shared across scenes so models transfer
    max_face_overlap: float = 0.3     # rejection-sample placements above this IoU
    scales_per_octave: int = 4
    min_pyramid_size: int = 24

    def __post_init__(self):
        if not 0.0 <= self.miss_prob <= 1.0:
            raise ValueError("miss_prob must be in [0, 1]")
        if self.keypoint_noise < 0 or self.clutter_rate < 0 or self.feature_noise < 0:
            raise ValueError("noise levels must be nonnegative")
        if self.feature_dim < 0:
            raise ValueError("feature_dim must be >= 0")
        if self.face_count[0] < 0 or self.face_count[1] < self.face_count[0]:
            raise ValueError("bad face count range")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        for key in ("image_size", "face_count", "yaw_range", "pitch_range",
                    "roll_range", "scale_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class GroundTruthFace:
    face_key: str
    pose: Pose6
    keypoints: np.ndarray  # (2, L) noiseless projections
    ied: float
    detected: np.ndarray   # (L,) bool, keypoint detection survived the miss draw
    center_detected: bool

    @property
    def box(self) -> Box2:
        return bounding_box(self.keypoints)


# Standardization applied to relative-pose vectors before the feature
# embedding, so all six components contribute comparably.
_REL_SCALE = np.array([5.0, 5.0, 10.0, 1.0, 1.0, 1.0])


@functools.lru_cache(maxsize=8)
def _embeddings(feature_seed: int, feature_dim: int) -> dict:
    rng = np.random.default_rng(feature_seed)
    out = {}
    for name in KEYPOINT_NAMES + (FACE_CENTER,):
        G = rng.standard_normal((feature_dim, 6)) / math.sqrt(6.0)
        b = 0.5 * rng.standard_normal(feature_dim)
        out[name] = (G, b)
    return out


@dataclass
class Scene:
    spec: SceneSpec
    scene_id: str
    image_size: tuple[int, int]
    faces: list
    det_types: list
    det_xy: np.ndarray       # (n, 2)
    det_scale: np.ndarray    # (n,)
    det_score: np.ndarray    # (n,)
    det_face: list           # face_key or None (clutter)
    det_target: np.ndarray   # (n, 6) true relative pose; NaN rows for clutter
    features: np.ndarray     # (n, feature_dim)

    @functools.cached_property
    def detections(self) -> list:
        return [
            KeypointDetection(det_id=i, type=self.det_types[i],
                              position=self.det_xy[i], scale=float(self.det_scale[i]),
                              score=float(self.det_score[i]), feature_ref=i)
            for i in range(len(self.det_types))
        ]

    def feature_source(self):
        return lambda ref: self.features[ref]

    def scales(self) -> np.ndarray:
        return pyramid_scales(self.image_size, self.spec.scales_per_octave,
                              self.spec.min_pyramid_size)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "scene",
            "scene_id": self.scene_id,
            "image_size": list(self.image_size),
            "spec": self.spec.to_dict(),
            "faces": [
                {
                    "face_key": f.face_key,
                    "pose": f.pose.to_dict(),
                    "keypoints": f.keypoints.tolist(),
                    "ied": f.ied,
                    "detected": f.detected.tolist(),
                    "center_detected": f.center_detected,
                }
                for f in self.faces
            ],
            "detections": [
                {
                    "id": i,
                    "type": self.det_types[i],
                    "x": float(self.det_xy[i, 0]),
                    "y": float(self.det_xy[i, 1]),
                    "scale": float(self.det_scale[i]),
                    "score": float(self.det_score[i]),
                    "feature_ref": i,
                    "face_key": self.det_face[i],
                    "target": None if np.any(np.isnan(self.det_target[i]))
                    else self.det_target[i].tolist(),
                }
                for i in range(len(self.det_types))
            ],
            "features": self.features.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        spec = SceneSpec.from_dict(d["spec"])
        faces = []
        for fd in d["faces"]:
            pose = Pose6.from_dict(fd["pose"])
            faces.append(GroundTruthFace(
                face_key=fd["face_key"], pose=pose,
                keypoints=np.asarray(fd["keypoints"], dtype=float),
                ied=float(fd["ied"]),
                detected=np.asarray(fd["detected"], dtype=bool),
                center_detected=bool(fd["center_detected"]),
            ))
        rows = d["detections"]
        n = len(rows)
        det_target = np.full((n, 6), np.nan)
        for i, r in enumerate(rows):
            if r.get("target") is not None:
                det_target[i] = r["target"]
        return cls(
            spec=spec,
            scene_id=d["scene_id"],
            image_size=tuple(d["image_size"]),
            faces=faces,
            det_types=[r["type"] for r in rows],
            det_xy=np.array([[r["x"], r["y"]] for r in rows], dtype=float).reshape(n, 2),
            det_scale=np.array([r["scale"] for r in rows], dtype=float),
            det_score=np.array([r["score"] for r in rows], dtype=float),
            det_face=[r["face_key"] for r in rows],
            det_target=det_target,
            features=np.asarray(d["features"], dtype=float).reshape(
                n, spec.feature_dim),
        )


def _place_face(rng, spec: SceneSpec, shape: ShapeModel, boxes) -> Pose6:
    W, H = spec.image_size
    for _ in range(30):
        s = rng.uniform(*spec.scale_range)
        rpy = Rpy(roll=rng.uniform(*spec.roll_range),
                  pitch=rng.uniform(*spec.pitch_range),
                  yaw=rng.uniform(*spec.yaw_range))
        pose0 = Pose6.from_rpy(np.zeros(2), s, rpy)
        box0 = bounding_box(apply_pose(pose0, shape.points))
        lo = -box0.lo
        hi = np.array([W, H]) - box0.hi
        if np.any(hi <= lo):
            u = np.array([W, H]) / 2.0 - box0.center
        else:
            u = rng.uniform(lo, hi)
        pose = Pose6(u=u, s=s, A=pose0.A)
        box = Box2(lo=box0.lo + u, hi=box0.hi + u)
        if all(iou(box, b) <= spec.max_face_overlap for b in boxes):
            return pose
    return pose  # overcrowded scene: accept the last try


def gen_scene(spec: SceneSpec, shape: ShapeModel | None = None) -> Scene:
    """Deterministic scene synthesis from the spec's seed.

    Faces are placed with bounded mutual overlap; each of the nine
    keypoints (and the face center) yields a detection with probability
    ``1 - miss_prob`` at the face's pyramid octave, jittered by the
    keypoint noise; clutter detections are Poisson with uniform type,
    position, and pyramid scale.  Features embed each detection's true
    relative pose (clutter embeds a fake but plausible one), plus noise.
    """
    shape = shape if shape is not None else default_shape()
    rng = np.random.default_rng(spec.seed)
    scales = pyramid_scales(spec.image_size, spec.scales_per_octave,
                            spec.min_pyramid_size)
    embeddings = _embeddings(spec.feature_seed, spec.feature_dim)
    eye_dist = shape.eye_distance()
    kappa = frontal_extent(shape)
    sr_typical = spec.min_pyramid_size / kappa
    L = shape.n_points

    n_faces = int(rng.integers(spec.face_count[0], spec.face_count[1] + 1))
    faces = []
    det_types: list[str] = []
    det_xy: list[np.ndarray] = []
    det_scale: list[float] = []
    det_score: list[float] = []
    det_face: list = []
    det_target: list[np.ndarray] = []

    boxes: list[Box2] = []
    for i in range(n_faces):
        pose = _place_face(rng, spec, shape, boxes)
        keypoints = apply_pose(pose, shape.points)
        ied = pose.s * eye_dist
        boxes.append(bounding_box(keypoints))
        octave = face_octave(pose.s, shape, scales, spec.min_pyramid_size)

        detected = rng.random(L) >= spec.miss_prob
        center_detected = bool(rng.random() >= spec.miss_prob)
        face_key = f"{spec.seed}:{i}"
        positions = keypoints.T.copy()
        if spec.keypoint_noise > 0:
            positions = positions + spec.keypoint_noise * ied * rng.standard_normal((L, 2))
        center_pos = bounding_box(keypoints).center
        if spec.keypoint_noise > 0:
            center_pos = center_pos + spec.keypoint_noise * ied * rng.standard_normal(2)

        for j in range(L):
            if not detected[j]:
                continue
            det_types.append(shape.keypoint_names[j])
            det_xy.append(positions[j])
            det_scale.append(octave)
            det_score.append(1.0 + 0.3 * rng.standard_normal())
            det_face.append(face_key)
            rel = encode_rel(pose, (positions[j][0] / octave,
                                    positions[j][1] / octave, octave))
            det_target.append(rel.as_array())
        if center_detected:
            det_types.append(FACE_CENTER)
            det_xy.append(center_pos)
            det_scale.append(octave)
            det_score.append(1.0 + 0.3 * rng.standard_normal())
            det_face.append(face_key)
            rel = encode_rel(pose, (center_pos[0] / octave,
                                    center_pos[1] / octave, octave))
            det_target.append(rel.as_array())

        faces.append(GroundTruthFace(face_key=face_key, pose=pose,
                                     keypoints=keypoints, ied=ied,
                                     detected=detected,
                                     center_detected=center_detected))

    n_clutter = int(rng.poisson(spec.clutter_rate))
    all_types = list(KEYPOINT_NAMES) + [FACE_CENTER]
    for _ in range(n_clutter):
        det_types.append(all_types[int(rng.integers(len(all_types)))])
        det_xy.append(rng.uniform((0, 0), spec.image_size))
        det_scale.append(float(scales[int(rng.integers(len(scales)))]))
        det_score.append(0.5 * rng.standard_normal())
        det_face.append(None)
        det_target.append(np.full(6, np.nan))

    n_det = len(det_types)
    features = np.zeros((n_det, spec.feature_dim))
    for i in range(n_det):
        if np.any(np.isnan(det_target[i])):
            fake = np.array([
                rng.normal(0.0, 0.25 * sr_typical),
                rng.normal(0.0, 0.25 * sr_typical),
                sr_typical * 2.0 ** rng.uniform(-0.2, 0.2),
                rng.uniform(*spec.pitch_range),
                rng.uniform(*spec.yaw_range),
                rng.uniform(*spec.roll_range),
            ])
            rel_vec = fake
        else:
            rel_vec = det_target[i]
        if spec.feature_dim:
            G, b = embeddings[det_types[i]]
            x = G @ (rel_vec / _REL_SCALE) + b
            if spec.feature_noise > 0:
                x = x + spec.feature_noise * rng.standard_normal(spec.feature_dim)
            features[i] = x

    return Scene(
        spec=spec,
        scene_id=str(spec.seed),
        image_size=spec.image_size,
        faces=faces,
        det_types=det_types,
        det_xy=np.asarray(det_xy, dtype=float).reshape(n_det, 2),
        det_scale=np.asarray(det_scale, dtype=float),
        det_score=np.asarray(det_score, dtype=float),
        det_face=det_face,
        det_target=np.asarray(det_target, dtype=float).reshape(n_det, 6),
        features=features,
    )


def save_scenes(scenes, path) -> None:
    payload = {
        "schema_version": SCHEMA_VERSION,
        "kind": "scenes",
        "scenes": [s.to_dict() for s in scenes],
    }
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True)
        f.write("\n")


def load_scenes(path) -> list:
    with open(path) as f:
        payload = json.load(f)
    return [Scene.from_dict(d) for d in payload["scenes"]]


def rotation_batch(rolls, pitches, yaws) -> np.ndarray:
    """Vectorized rotation construction matching the scalar composition."""
    cr, sr = np.cos(rolls), np.sin(rolls)
    cp, sp = np.cos(pitches), np.sin(pitches)
    cy, sy = np.cos(yaws), np.sin(yaws)
    R = np.empty(np.broadcast(cr, cp, cy).shape + (3, 3))
    R[..., 0, 0] = cr * cy - sr * sp * sy
    R[..., 0, 1] = -sr * cp
    R[..., 0, 2] = cr * sy + sr * sp * cy
    R[..., 1, 0] = sr * cy + cr * sp * sy
    R[..., 1, 1] = cr * cp
    R[..., 1, 2] = sr * sy - cr * sp * cy
    R[..., 2, 0] = -cp * sy
    R[..., 2, 1] = sp
    R[..., 2, 2] = cp * cy
    return R


def brute_force_rotation_fit(A: np.ndarray, B: np.ndarray, grid_deg: float) -> float:
    """Minimum alignment residual over an exhaustive Euler-angle grid.

    For every grid rotation, scale and translation are solved in closed
    form; returns the smallest residual of
    ``||ones u^T + s A R - B||^2``.  Requires grid_deg to divide 360.
    """
    if 360.0 % grid_deg != 0:
        raise ValueError("grid spacing must divide 360 degrees")
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape != B.shape or A.shape[1] != 3:
        raise ValueError("point sets must be (p, 3) and share shape")
    A_c = A - A.mean(axis=0)
    B_c = B - B.mean(axis=0)
    M = A_c.T @ B_c
    tA = float(np.sum(A_c * A_c))
    C = float(np.sum(B_c * B_c))

    step = math.radians(grid_deg)
    full = np.arange(0.0, 2 * math.pi - 1e-12, step)
    half = np.arange(-math.pi / 2, math.pi / 2 + 1e-12, step)
    rolls, pitches, yaws = np.meshgrid(full, half, full, indexing="ij")
    R = rotation_batch(rolls.ravel(), pitches.ravel(), yaws.ravel())
    # Grid rotations act on column vectors; the row-convention objective
    # uses their transposes, which sweeps the same set of rotations.
    tr = np.einsum("nij,ij->n", R, M)
    residuals = C - tr**2 / tA
    return float(residuals.min())


@dataclass(frozen=True)
class EvalReport:
    """Candidate-set quality: how many candidates are far from any face,
    and how many faces have a nearby candidate."""

    fp_lt_03: float   # % of candidates with max ground-truth overlap < 0.3
    fp_lt_05: float   # % of candidates with max ground-truth overlap < 0.5
    det_gt_05: float  # % of faces covered by some candidate at IoU > 0.5
    det_gt_07: float  # % of faces covered by some candidate at IoU > 0.7
    n_candidates: int
    n_faces: int

    def csv_row(self) -> str:
        return ",".join(repr(v) for v in
                        (self.fp_lt_03, self.fp_lt_05, self.det_gt_05, self.det_gt_07))

    CSV_HEADER = "fp_rate_lt_0.3,fp_rate_lt_0.5,det_rate_gt_0.5,det_rate_gt_0.7"

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "eval_report",
            "fp_lt_03": self.fp_lt_03,
            "fp_lt_05": self.fp_lt_05,
            "det_gt_05": self.det_gt_05,
            "det_gt_07": self.det_gt_07,
            "n_candidates": self.n_candidates,
            "n_faces": self.n_faces,
        }


def overlap_matrix(candidate_boxes, face_boxes) -> np.ndarray:
    out = np.zeros((len(candidate_boxes), len(face_boxes)))
    for i, cb in enumerate(candidate_boxes):
        for j, fb in enumerate(face_boxes):
            out[i, j] = iou(cb, fb)
    return out


def evaluate_candidates(cands, faces) -> EvalReport:
    """Overlap-based candidate metrics; rates over empty sets read as zero."""
    cand_boxes = [c.box for c in cands]
    face_boxes = [f.box for f in faces]
    O = overlap_matrix(cand_boxes, face_boxes)
    if len(cands) and len(faces):
        cand_best = O.max(axis=1)
        face_best = O.max(axis=0)
    else:
        cand_best = np.zeros(len(cands))
        face_best = np.zeros(len(faces))
    pct = lambda mask, n: 100.0 * float(np.sum(mask)) / n if n else 0.0
    return EvalReport(
        fp_lt_03=pct(cand_best < 0.3, len(cands)),
        fp_lt_05=pct(cand_best < 0.5, len(cands)),
        det_gt_05=pct(face_best > 0.5, len(faces)),
        det_gt_07=pct(face_best > 0.7, len(faces)),
        n_candidates=len(cands),
        n_faces=len(faces),
    )


def aggregate_eval(per_scene_pairs) -> EvalReport:
    """Pool candidates and faces across scenes (overlaps never cross scenes)."""
    n_c = n_f = 0
    fp3 = fp5 = d5 = d7 = 0.0
    for cands, faces in per_scene_pairs:
        r = evaluate_candidates(cands, faces)
        fp3 += r.fp_lt_03 * r.n_candidates / 100.0
        fp5 += r.fp_lt_05 * r.n_candidates / 100.0
        d5 += r.det_gt_05 * r.n_faces / 100.0
        d7 += r.det_gt_07 * r.n_faces / 100.0
        n_c += r.n_candidates
        n_f += r.n_faces
    return EvalReport(
        fp_lt_03=100.0 * fp3 / n_c if n_c else 0.0,
        fp_lt_05=100.0 * fp5 / n_c if n_c else 0.0,
        det_gt_05=100.0 * d5 / n_f if n_f else 0.0,
        det_gt_07=100.0 * d7 / n_f if n_f else 0.0,
        n_candidates=n_c,
        n_faces=n_f,
    )


def procrustes_distance(A: np.ndarray, B: np.ndarray) -> float:
    """Frobenius distance between centered, normalized shapes after the best
    proper-rotation alignment."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    A = A - A.mean(axis=1, keepdims=True)
    B = B - B.mean(axis=1, keepdims=True)
    A = A / np.linalg.norm(A)
    B = B / np.linalg.norm(B)
    M = B @ A.T
    U, _, Vt = np.linalg.svd(M)
    if np.linalg.det(U @ Vt) < 0:
        U = U.copy()
        U[:, -1] *= -1
    return float(np.linalg.norm(U @ Vt @ A - B))


def planted_structure_dataset(n: int, n_features: int = 50, n_informative: int = 3,
                              n_levels: int = 8, margin: float = 0.01,
                              seed: int = 0, table_seed: int = 99):
    """Targets that are an exact sum of step functions of a few features.

    The informative features drive piecewise-constant 6-vector tables over
    ``n_levels`` equal cells of [0, 1]; samples near cell boundaries are
    nudged away so any near-equal learned binning reproduces the targets
    exactly.  Returns (features, targets).
    """
    tab_rng = np.random.default_rng(table_seed)
    tables = tab_rng.standard_normal((n_informative, n_levels, 6))
    rng = np.random.default_rng(seed)
    X = rng.uniform(0.0, 1.0, (n, n_features))
    cells = np.minimum((X[:, :n_informative] * n_levels).astype(int), n_levels - 1)
    # push samples off the cell boundaries
    frac = X[:, :n_informative] * n_levels - cells
    lo = frac < margin
    hi = frac > 1.0 - margin
    X[:, :n_informative][lo] += margin / n_levels
    X[:, :n_informative][hi] -= margin / n_levels
    Y = np.zeros((n, 6))
    for j in range(n_informative):
        Y += tables[j][cells[:, j]]
    return X, Y


def yaw_sensitive_dataset(n_images: int, per_image: int, n_features: int = 12,
                          flip_feature: int = 0, noise: float = 0.3,
                          seed: int = 0):
    """Binary-labelled examples whose informative weights depend on yaw.

    The flip feature carries the label with a sign that follows the yaw's
    sign, so a parameter-insensitive linear model sees it average out
    while a parameter-sensitive one can exploit it.  Returns TrainExamples
    (one synthetic face per positive example).
    """
    rng = np.random.default_rng(seed)
    data = []
    face = 0
    for img in range(n_images):
        for _ in range(per_image):
            yaw = rng.uniform(-1.4, 1.4)
            positive = bool(rng.random() < 0.5)
            x = noise * rng.standard_normal(n_features)
            if positive:
                x[flip_feature] += 1.0 if yaw >= 0 else -1.0
            overlaps = {}
            if positive:
                overlaps[f"face{face}"] = 1.0
                face += 1
            data.append(TrainExample(features=x, theta=yaw, image_id=f"img{img:04d}",
                                     overlaps=overlaps))
    return data


def random_candidates(rng, n: int, shape: ShapeModel,
                      image_size=(480, 320)) -> list:
    """Random scored face candidates for suppression stress tests: random
    poses of the model, half of them with jittered (snapped-like) keypoints."""
    spec = SceneSpec(seed=0, image_size=image_size, max_face_overlap=1.0)
    cands = []
    for i in range(n):
        pose = _place_face(rng, spec, shape, [])
        kp = apply_pose(pose, shape.points)
        ied = pose.s * shape.eye_distance()
        if rng.random() < 0.5:
            kp = kp + 0.05 * ied * rng.standard_normal(kp.shape)
        cands.append(FaceCandidate(candidate_id=i, pose=pose, keypoints=kp, ied=ied,
                                   support=int(rng.integers(0, 10)),
                                   score=float(rng.normal(0.0, 2.0)), source_id=i))
    return cands


def exhaustive_best_subset(cands, score_threshold: float, shape: ShapeModel,
                           overlap: float = 0.5):
    """Exact minimum-energy face subset by enumeration (small sets only).

    Energies are additive per candidate once feasibility (pairwise IoU
    below the threshold) holds, so each subset is a masked sum.  Returns
    (best_energy, best_candidate_ids); the empty set scores 0.
    """
    cands = list(cands)
    n = len(cands)
    if n > 20:
        raise ValueError("exhaustive search is for small candidate sets")
    conflicts = [0] * n
    for i in range(n):
        for j in range(i + 1, n):
            if iou(cands[i].box, cands[j].box) >= overlap:
                conflicts[i] |= 1 << j
                conflicts[j] |= 1 << i
    energies = [score_threshold - c.score +
                total_energy([c], score_threshold, shape, overlap)
                - (score_threshold - c.score) for c in cands]
    # per-candidate energy: (threshold - score) + coherence
    best_energy = 0.0
    best_mask = 0
    for mask in range(1, 1 << n):
        ok = True
        m = mask
        total = 0.0
        while m:
            i = (m & -m).bit_length() - 1
            if conflicts[i] & mask:
                ok = False
                break
            total += energies[i]
            m &= m - 1
        if ok and total < best_energy:
            best_energy = total
            best_mask = mask
    ids = [cands[i].candidate_id for i in range(n) if best_mask & (1 << i)]
    return best_energy, ids


def auc_score(pos_scores, neg_scores) -> float:
    """Area under the ROC curve via the rank statistic, ties counted half."""
    pos = np.asarray(pos_scores, dtype=float)
    neg = np.asarray(neg_scores, dtype=float)
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("need both positive and negative scores")
    all_scores = np.concatenate([pos, neg])
    order = np.argsort(all_scores, kind="mergesort")
    ranks = np.empty(len(all_scores))
    # average ranks over ties
    sorted_scores = all_scores[order]
    i = 0
    while i < len(sorted_scores):
        j = i
        while j + 1 < len(sorted_scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    r_pos = ranks[:len(pos)].sum()
    return float((r_pos - len(pos) * (len(pos) + 1) / 2.0) / (len(pos) * len(neg)))
