"""Face candidate pipeline: proposal, keypoint support, features, scoring, NMS.

Every keypoint detection proposes one face: its feature vector is
regressed to a relative 6-DoF pose, decoded against the detection's
pyramid anchor, and the candidate's keypoints are predicted from the
rigid 3D model.  Candidates are then corroborated by counting same-type
detections near the predicted keypoints (support, maximized over pyramid
scales), scored by a parameter-sensitive model on source plus hand-built
"special" features, and finally filtered by greedy non-maximal
suppression under a pairwise overlap constraint.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .errors import DegenerateGridError
from .geometry import Box2, Pose6, apply_pose, bounding_box, iou
from .pose_regression import decode_rel, predict_rel
from .psm import PsmWeights
from .shape_learn import FACE_CENTER, ShapeModel

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class KeypointDetection:
    """Bottom-up evidence: a typed 2D detection with pyramid scale and score.

    ``position`` is in base-image units; ``feature_ref`` indexes the
    detection's feature vector in whatever feature table the scene or
    file provides.
    """

    det_id: int
    type: str
    position: np.ndarray
    scale: float
    score: float
    feature_ref: int

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(2))
        if not self.scale > 0:
            raise ValueError("detection scale must be positive")

    def anchor(self) -> tuple[float, float, float]:
        """Regression anchor: coordinates at this detection's pyramid scale."""
        return (self.position[0] / self.scale, self.position[1] / self.scale, self.scale)


@dataclass(frozen=True)
class FaceCandidate:
    """A face hypothesis: pose plus predicted (possibly snapped) keypoints."""

    candidate_id: int
    pose: Pose6
    keypoints: np.ndarray  # (2, L)
    ied: float
    support: int = 0
    score: float = 0.0
    source_id: int = -1
    feature_ref: int = -1
    special: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "keypoints", np.asarray(self.keypoints, dtype=float))
        if not self.ied > 0:
            raise ValueError("inter-eye distance must be positive")

    @property
    def box(self) -> Box2:
        return bounding_box(self.keypoints)


@dataclass
class DetectionConfig:
    n_supp: int = 4
    support_radius_factor: float = 0.1
    nms_overlap: float = 0.5
    score_threshold: float = 0.0
    scales_per_octave: int = 4
    min_pyramid_size: int = 24
    special_distance_cap: float = 0.32
    special_score_floor: float = -1.1
    proposal_types: str = "all"  # "all" or "center"

    def __post_init__(self):
        if self.n_supp < 0:
            raise ValueError("n_supp must be >= 0")
        if not 0.0 < self.nms_overlap < 1.0:
            raise ValueError("nms overlap must be in (0, 1)")
        if self.support_radius_factor <= 0 or self.scales_per_octave <= 0 \
                or self.min_pyramid_size <= 0 or self.special_distance_cap <= 0:
            raise ValueError("config values must be positive")
        if self.proposal_types not in ("all", "center"):
            raise ValueError("proposal_types must be 'all' or 'center'")


def generate_candidates(dets, regressors: dict, shape: ShapeModel, feature_source) -> list[FaceCandidate]:
    """One face proposal per detection.

    Each detection's features are regressed to a relative pose and decoded
    against the detection's own anchor; proposals whose predicted scale
    ratio is not positive are dropped.  The candidate keypoints are the
    rigid model projected under the decoded pose, so they satisfy
    ``keypoints == apply_pose(pose, shape)`` exactly at proposal time.
    """
    eye_dist = shape.eye_distance()
    out = []
    for det in dets:
        try:
            reg = regressors[det.type]
        except KeyError:
            raise ValueError(f"no pose regressor for detection type {det.type!r}") from None
        rel = predict_rel(reg, feature_source(det.feature_ref))
        if rel.scale_ratio <= 0.0:
            continue
        pose = decode_rel(rel, det.anchor())
        out.append(FaceCandidate(
            candidate_id=len(out),
            pose=pose,
            keypoints=apply_pose(pose, shape.points),
            ied=pose.s * eye_dist,
            source_id=det.det_id,
            feature_ref=det.feature_ref,
        ))
    return out


def compute_support(cand: FaceCandidate, dets, scales, keypoint_names,
                    radius_factor: float = 0.1) -> tuple[int, np.ndarray]:
    """Count keypoints corroborated by same-type detections at one pyramid scale.

    A predicted keypoint is supported at a scale when a detection of its
    type exists at that scale within ``radius_factor * ied`` (distances
    compare identically before and after rescaling, but which detections
    exist differs per scale).  The overall support is the maximum over
    scales; supporting detections replace the corresponding predicted
    keypoints ("snapping"), taken from the lowest maximizing scale.
    """
    L = cand.keypoints.shape[1]
    radius = radius_factor * cand.ied
    by_scale: dict[float, list] = {}
    for det in dets:
        if det.type in keypoint_names:
            by_scale.setdefault(float(det.scale), []).append(det)

    best_count = 0
    best_snapped = cand.keypoints.copy()
    for scale in sorted(set(float(s) for s in scales)):
        scale_dets = by_scale.get(scale)
        if not scale_dets:
            continue
        count = 0
        snapped = cand.keypoints.copy()
        for j, name in enumerate(keypoint_names):
            best_d = None
            best_pos = None
            for det in scale_dets:
                if det.type != name:
                    continue
                d = float(np.hypot(*(det.position - cand.keypoints[:, j])))
                if d <= radius and (best_d is None or d < best_d):
                    best_d, best_pos = d, det.position
            if best_d is not None:
                count += 1
                snapped[:, j] = best_pos
        if count > best_count:
            best_count = count
            best_snapped = snapped
    return best_count, best_snapped


def apply_support(cands, dets, scales, shape: ShapeModel,
                  config: DetectionConfig) -> list[FaceCandidate]:
    """Attach support and snapped keypoints; drop candidates under the cutoff."""
    out = []
    for cand in cands:
        support, snapped = compute_support(cand, dets, scales, shape.keypoint_names,
                                           config.support_radius_factor)
        if support >= config.n_supp:
            out.append(replace(cand, support=support, keypoints=snapped))
    return out


def _tangent_axes(shape: ShapeModel, keypoint_index: int) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal in-plane axes of the approximate tangent plane at a keypoint.

    The plane is spanned by the two nearest other model keypoints; the
    first axis is the world x-axis projected into the plane (falling back
    to y when x is normal to it), so a frontal keypoint yields an
    axis-aligned grid under the identity pose.
    """
    pts = shape.points
    rel = pts - pts[:, [keypoint_index]]
    dists = np.linalg.norm(rel, axis=0)
    order = np.argsort(dists, kind="stable")
    neighbors = [j for j in order if j != keypoint_index][:2]
    if len(neighbors) < 2:
        raise DegenerateGridError("need at least three model keypoints")
    v1 = rel[:, neighbors[0]]
    v2 = rel[:, neighbors[1]]
    normal = np.cross(v1, v2)
    nn = np.linalg.norm(normal)
    if nn < 1e-12 * max(np.linalg.norm(v1) * np.linalg.norm(v2), 1e-300):
        raise DegenerateGridError("nearest keypoints are collinear; tangent plane undefined")
    normal = normal / nn
    if normal[2] < 0.0:
        normal = -normal
    e1 = np.array([1.0, 0.0, 0.0]) - normal[0] * normal
    if np.linalg.norm(e1) < 1e-8:
        e1 = np.array([0.0, 1.0, 0.0]) - normal[1] * normal
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(normal, e1)
    return e1, e2


def sampling_grid(pose: Pose6, shape: ShapeModel, keypoint_index: int,
                  grid_n: int, spacing: float,
                  degenerate_tol: float = 1e-8) -> np.ndarray:
    """Pose-aligned sampling lattice around one predicted keypoint.

    The keypoint's tangent-plane axes are pushed through the scaled
    rotation and projected, giving a skewed 2D grid centered at the
    keypoint's image location; returns ``(grid_n, grid_n, 2)``.  Raises
    when the rotated tangent plane is seen edge-on (its normal
    perpendicular to the view axis), where the grid collapses to a line.
    """
    if grid_n < 1 or grid_n % 2 == 0:
        raise ValueError("grid_n must be odd so the center point exists")
    e1, e2 = _tangent_axes(shape, keypoint_index)
    normal_z = (pose.A @ np.cross(e1, e2))[2]
    if abs(normal_z) <= degenerate_tol:
        raise DegenerateGridError("tangent plane is edge-on under this pose")
    a1 = pose.s * (pose.A @ e1)[:2]
    a2 = pose.s * (pose.A @ e2)[:2]
    center = apply_pose(pose, shape.points[:, [keypoint_index]])[:, 0]
    h = (grid_n - 1) // 2
    steps = np.arange(-h, h + 1, dtype=float) * spacing
    return (center[None, None, :]
            + steps[:, None, None] * a1[None, None, :]
            + steps[None, :, None] * a2[None, None, :])


def special_features(cand: FaceCandidate, dets, keypoint_names,
                     distance_cap: float = 0.32,
                     score_floor: float = -1.1) -> np.ndarray:
    """Hand-built per-candidate evidence summary (21 values).

    For each keypoint plus the face center: the distance from the
    predicted location to the closest same-type detection as a fraction
    of the candidate's inter-eye distance, capped (a missing type takes
    the cap), and that detection's score floored (a missing type takes
    the floor).  The 21st value is the support count.
    """
    by_type: dict[str, list] = {}
    for det in dets:
        by_type.setdefault(det.type, []).append(det)

    targets = [(name, cand.keypoints[:, j]) for j, name in enumerate(keypoint_names)]
    targets.append((FACE_CENTER, cand.box.center))

    values = []
    for name, pos in targets:
        closest = None
        best_d = None
        for det in by_type.get(name, ()):
            d = float(np.hypot(*(det.position - pos)))
            if best_d is None or d < best_d:
                best_d, closest = d, det
        if closest is None:
            values.extend([distance_cap, score_floor])
        else:
            values.append(min(best_d / cand.ied, distance_cap))
            values.append(max(closest.score, score_floor))
    values.append(float(cand.support))
    return np.asarray(values)


def attach_special_features(cands, dets, shape: ShapeModel,
                            config: DetectionConfig) -> list[FaceCandidate]:
    return [replace(c, special=special_features(
        c, dets, shape.keypoint_names,
        config.special_distance_cap, config.special_score_floor)) for c in cands]


def score_candidates(cands, weights: PsmWeights, feature_source) -> list[FaceCandidate]:
    """Score each candidate at its yaw angle.

    The scored feature vector concatenates the source detection's features
    with the candidate's special features, which must have been attached.
    """
    out = []
    for cand in cands:
        if cand.special is None:
            raise ValueError("candidate is missing special features")
        x = np.concatenate([feature_source(cand.feature_ref), cand.special])
        out.append(replace(cand, score=weights.score(x, cand.pose.yaw())))
    return out


def nms(cands, score_threshold: float, overlap: float) -> list[FaceCandidate]:
    """Greedy suppression: repeatedly keep the best-scoring candidate above
    the threshold and drop everything overlapping it by at least ``overlap``
    IoU.  Ties break toward the lower candidate id."""
    remaining = list(cands)
    kept = []
    while remaining:
        best = min((c for c in remaining if c.score > score_threshold),
                   key=lambda c: (-c.score, c.candidate_id), default=None)
        if best is None:
            break
        kept.append(best)
        box = best.box
        remaining = [c for c in remaining if iou(c.box, box) < overlap]
    return kept


def coherence_term(cand: FaceCandidate, shape: ShapeModel) -> float:
    """Squared distance between kept keypoints and the rigid prediction,
    normalized by the squared inter-eye distance."""
    predicted = apply_pose(cand.pose, shape.points)
    return float(np.sum((cand.keypoints - predicted) ** 2)) / cand.ied**2


def total_energy(faces, score_threshold: float, shape: ShapeModel,
                 overlap: float = 0.5) -> float:
    """Energy of a face set: sum of (threshold - score), plus each face's
    pose-keypoint coherence, plus a hard mutual-overlap constraint
    (infinite when any pair overlaps by at least ``overlap``)."""
    faces = list(faces)
    for i, a in enumerate(faces):
        for b in faces[i + 1:]:
            if iou(a.box, b.box) >= overlap:
                return float("inf")
    total = 0.0
    for c in faces:
        total += score_threshold - c.score
        total += coherence_term(c, shape)
    return total


def save_detections_jsonl(dets, path, scene_ids=None) -> None:
    """Write detections as JSON lines (type, x, y, scale, score, feature_ref)."""
    with open(path, "w") as f:
        for i, det in enumerate(dets):
            row = {
                "id": det.det_id,
                "type": det.type,
                "x": float(det.position[0]),
                "y": float(det.position[1]),
                "scale": float(det.scale),
                "score": float(det.score),
                "feature_ref": det.feature_ref,
            }
            if scene_ids is not None:
                row["scene_id"] = scene_ids[i]
            f.write(json.dumps(row, sort_keys=True) + "\n")


def load_detections_jsonl(path):
    """Read detections (and their scene ids, when present) from JSON lines."""
    dets = []
    scene_ids = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            dets.append(KeypointDetection(
                det_id=int(row["id"]),
                type=row["type"],
                position=np.array([row["x"], row["y"]]),
                scale=float(row["scale"]),
                score=float(row["score"]),
                feature_ref=int(row["feature_ref"]),
            ))
            scene_ids.append(row.get("scene_id", 0))
    return dets, scene_ids
