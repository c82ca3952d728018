"""Mocap unification: name cleaning, canonicalization, contacts, statistics.

Raw mocap files disagree on orientation, scale, root conventions, and naming.
This module turns a parsed BVH document into a canonical clip: +Y up / +Z
mean facing, unit mean bone length, rotations relative to a natural rest
pose, first frame horizontally centered at the origin, and root heights
grounded using the rest-pose feet. Near-canonical inputs are snapped to exact
no-ops so the pipeline is idempotent bit-for-bit.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .bvh import BvhDocument
from .motion import FC, JointMotion, MotionTensor
from .skeleton import Topology, RestPose, build_topology


class PreprocessError(ValueError):
    pass


class FacingError(PreprocessError):
    pass


class DegenerateSkeletonError(PreprocessError):
    pass


@dataclass
class PreprocessConfig:
    target_bone_length: float = 1.0
    contact_velocity_threshold: float = 0.05  # units per frame
    contact_height_threshold: float = 0.08
    idle_pattern: str = "idle"
    d_max: int = 5
    # inputs already within this tolerance of canonical are left untouched
    snap_tolerance: float = 1e-4
    foot_tokens: tuple[str, ...] = ("foot", "feet", "toe", "ankle", "hoof", "paw")
    std_epsilon: float = 1e-6


@dataclass
class ClipMeta:
    skeleton_id: str
    source_file: str
    fps: float
    frame_count: int
    in_place_suspect: bool = False


@dataclass
class PreprocessResult:
    topology: Topology
    rest: RestPose
    motion: JointMotion
    meta: ClipMeta
    names: list[str]


# --- joint name cleaning -------------------------------------------------

_SIDE_EXPANSION = {"l": "left", "r": "right"}
_DROP_TOKENS = {"bip", "biped", "mixamorig", "armature", "def", "rig"}
_CAMEL_RE = re.compile(r"(?<=[a-z0-9])(?=[A-Z])|(?<=[A-Z])(?=[A-Z][a-z])")


def clean_name(raw: str) -> str:
    """Normalize one joint name: drop digits/symbols/rig prefixes, expand
    L/R side markers, lowercase. Empty results fall back to "joint"."""
    spaced = _CAMEL_RE.sub(" ", raw)
    spaced = re.sub(r"[^A-Za-z]+", " ", spaced)
    tokens = []
    for tok in spaced.split():
        low = tok.lower()
        if low in _DROP_TOKENS:
            continue
        tokens.append(_SIDE_EXPANSION.get(low, low))
    return " ".join(tokens) if tokens else "joint"


def clean_names(raw_names) -> list[str]:
    return [clean_name(n) for n in raw_names]


def find_feet(names, config: PreprocessConfig | None = None) -> frozenset[int]:
    """Indices of joints whose cleaned name marks them as ground contacts."""
    tokens = (config or PreprocessConfig()).foot_tokens
    feet = set()
    for i, name in enumerate(names):
        words = set(name.split())
        if words & set(tokens):
            feet.add(i)
    return frozenset(feet)


# --- document decoding ---------------------------------------------------


def _rotation_order(channels) -> tuple[str, list[int]]:
    order = ""
    idx = []
    for k, ch in enumerate(channels):
        if ch.endswith("rotation"):
            order += ch[0].upper()
            idx.append(k)
    return order, idx


def extract_motion(doc: BvhDocument):
    """Decode a document into arrays: parents, offsets, raw names, root
    world positions, and per-joint local rotation matrices.

    Rotation channels are interpreted intrinsically in file order and
    converted from degrees here; everything downstream works in radians /
    matrices. Position channels on non-root joints are ignored.
    """
    n = len(doc.joints)
    parents = doc.parent_array()
    offsets = np.stack([j.offset for j in doc.joints]).astype(np.float64)
    names = [j.name for j in doc.joints]
    starts = doc.channel_offsets()
    frames = doc.frames
    fcount = doc.frame_count

    rotations = np.tile(np.eye(3), (fcount, n, 1, 1))
    for j, joint in enumerate(doc.joints):
        order, idx = _rotation_order(joint.channels)
        if not order:
            continue
        cols = [starts[j] + k for k in idx]
        rotations[:, j] = Rotation.from_euler(
            order, frames[:, cols], degrees=True
        ).as_matrix()

    root_positions = np.tile(offsets[0], (fcount, 1))
    root_channels = doc.joints[0].channels
    for k, ch in enumerate(root_channels):
        if ch.endswith("position"):
            axis = "XYZ".index(ch[0].upper())
            root_positions[:, axis] = offsets[0, axis] + frames[:, starts[0] + k]
    return parents, offsets, names, root_positions, rotations


def document_from_motion(
    topology: Topology,
    rest: RestPose,
    names,
    motion: JointMotion,
) -> BvhDocument:
    """Encode a canonical clip back into a BVH document.

    The root keeps its rest offset; its position channels store the world
    trajectory relative to that offset, so re-reading reproduces the clip.
    """
    from .bvh import BvhJoint

    n = topology.joint_count
    joints = []
    for j in range(n):
        channels = (
            ["Xposition", "Yposition", "Zposition", "Zrotation", "Xrotation", "Yrotation"]
            if j == 0
            else ["Zrotation", "Xrotation", "Yrotation"]
        )
        joints.append(
            BvhJoint(
                name=names[j],
                parent=int(topology.parent[j]) if j else -1,
                offset=rest.offsets[j].copy(),
                channels=channels,
            )
        )
    total = 6 + 3 * (n - 1)
    frames = np.zeros((motion.frame_count, total))
    frames[:, 0:3] = motion.root_positions - rest.offsets[0]
    col = 3
    for j in range(n):
        eul = Rotation.from_matrix(motion.rotations[:, j]).as_euler("ZXY", degrees=True)
        frames[:, col : col + 3] = eul
        col += 3
    return BvhDocument(
        joints=joints,
        frame_count=motion.frame_count,
        frame_time=1.0 / motion.fps,
        frames=frames,
    )


# --- canonicalization ----------------------------------------------------


def _yaw_matrix(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _relativize_to_rest(parents, offsets, rotations, rest_local, snap_tol):
    """Re-express a rig so the given pose becomes its zero-rotation rest.

    ``rest_local`` holds per-joint local rotations of the natural pose; the
    root is excluded (kept identity) so global heading is untouched. World
    motion is exactly preserved.
    """
    n = len(parents)
    b = rest_local.copy()
    b[0] = np.eye(3)
    if np.max(np.abs(b - np.eye(3))) < snap_tol:
        return offsets, rotations
    b_global = np.zeros_like(b)
    b_global[0] = np.eye(3)
    for j in range(1, n):
        b_global[j] = b_global[parents[j]] @ b[j]
    new_offsets = offsets.copy()
    new_rotations = rotations.copy()
    for j in range(1, n):
        p = parents[j]
        new_offsets[j] = b_global[p] @ offsets[j]
        new_rotations[:, j] = b_global[p] @ rotations[:, j] @ b_global[j].T
    new_rotations[:, 0] = rotations[:, 0] @ b_global[0].T
    return new_offsets, new_rotations


def _rest_world_positions(parents, offsets) -> np.ndarray:
    """Forward kinematics of the rest pose (zero rotations), root at its offset."""
    n = len(parents)
    world = np.zeros((n, 3))
    world[0] = offsets[0]
    for j in range(1, n):
        world[j] = world[parents[j]] + offsets[j]
    return world


def preprocess_clip(
    doc: BvhDocument,
    rest_doc: BvhDocument | None = None,
    config: PreprocessConfig | None = None,
    skeleton_id: str = "skeleton",
    source_file: str = "",
) -> PreprocessResult:
    """Canonicalize one clip; see the module docstring for the conventions.

    ``rest_doc`` supplies the natural rest pose (its first frame). Without
    one the rig is taken as already natural (identity rest), which the
    pipeline arranges by passing an idle clip here.
    """
    cfg = config or PreprocessConfig()
    tol = cfg.snap_tolerance

    raw_parents, offsets, raw_names, root_pos, rotations = extract_motion(doc)
    names = clean_names(raw_names)
    feet = find_feet(names, cfg)
    topo, perm = build_topology(raw_parents, feet)
    inv = None
    if not np.array_equal(perm, np.arange(len(raw_parents))):
        inv = np.argsort(perm)
        offsets = offsets[inv]
        names = [names[i] for i in inv]
        rotations = rotations[:, inv]
    parents = [int(p) for p in topo.parent]

    # natural rest pose
    if rest_doc is not None:
        if len(rest_doc.joints) != topo.joint_count:
            raise PreprocessError(
                "rest document joint count does not match the clip"
            )
        _, _, _, _, rest_rots = extract_motion(rest_doc)
        rest_local = rest_rots[0]
        if inv is not None:
            rest_local = rest_local[inv]
    else:
        rest_local = np.tile(np.eye(3), (topo.joint_count, 1, 1))
    offsets, rotations = _relativize_to_rest(
        parents, offsets, rotations, rest_local, tol
    )

    # uniform scale to the global mean bone length
    lengths = np.linalg.norm(offsets[1:], axis=1)
    lengths = lengths[lengths > 1e-9]
    if len(lengths) == 0:
        raise DegenerateSkeletonError("all bones have zero length")
    scale = cfg.target_bone_length / float(lengths.mean())
    if abs(scale - 1.0) < tol:
        scale = 1.0
    offsets = offsets * scale
    root_pos = root_pos * scale

    # canonical facing: mean root forward projected to the ground plane -> +Z
    forward = rotations[:, 0] @ np.array([0.0, 0.0, 1.0])
    flat = forward[:, [0, 2]]
    mean_fwd = flat.mean(axis=0)
    if np.linalg.norm(mean_fwd) < 1e-8:
        raise FacingError("mean root forward direction is vertical")
    theta = float(np.arctan2(mean_fwd[0], mean_fwd[1]))
    if abs(theta) < tol:
        theta = 0.0
    if theta != 0.0:
        fix = _yaw_matrix(-theta)
        root_pos = root_pos @ fix.T
        rotations[:, 0] = fix @ rotations[:, 0]

    # grounding from rest-pose feet (or the lowest joint when footless)
    rest_world = _rest_world_positions(parents, offsets)
    heights = rest_world[:, 1]
    ground = float(
        heights[sorted(topo.feet)].min() if topo.feet else heights.min()
    )
    if abs(ground) < tol:
        ground = 0.0
    root_pos[:, 1] -= ground
    rest_root_height = float(offsets[0, 1] - ground)

    # center the first frame horizontally at the origin
    center = root_pos[0, [0, 2]].copy()
    if np.max(np.abs(center)) < tol:
        center = np.zeros(2)
    root_pos[:, 0] -= center[0]
    root_pos[:, 2] -= center[1]

    final_offsets = offsets.copy()
    final_offsets[0] = [0.0, rest_root_height, 0.0]

    fps = 1.0 / doc.frame_time
    motion = JointMotion(root_positions=root_pos, rotations=rotations, fps=fps)
    meta = ClipMeta(
        skeleton_id=skeleton_id,
        source_file=source_file,
        fps=fps,
        frame_count=doc.frame_count,
        in_place_suspect=_detect_in_place(root_pos, rotations),
    )
    return PreprocessResult(
        topology=topo,
        rest=RestPose(final_offsets),
        motion=motion,
        meta=meta,
        names=names,
    )


def _detect_in_place(root_pos: np.ndarray, rotations: np.ndarray) -> bool:
    """Flag clips that animate heavily while the root never translates.

    Such clips usually had an artificial bone pinning the character to the
    origin; they are reported, not repaired.
    """
    if len(root_pos) < 6:
        return False
    horizontal = root_pos[:, [0, 2]]
    travel = float(np.abs(horizontal - horizontal[0]).max())
    per_frame = np.abs(np.diff(rotations, axis=0)).max(axis=(1, 2, 3))
    return travel < 1e-3 and float(per_frame.mean()) > 0.01


# --- foot contacts -------------------------------------------------------


def detect_foot_contacts(
    positions: np.ndarray,
    feet,
    config: PreprocessConfig | None = None,
) -> np.ndarray:
    """Binary (frames, joints) contact labels from world-space positions.

    A foot is in contact when it is both slow (displacement per frame below
    the velocity threshold) and low. Non-foot joints are always 0.
    """
    cfg = config or PreprocessConfig()
    n, j, _ = positions.shape
    labels = np.zeros((n, j))
    if not feet:
        return labels
    # a frame counts as stationary if the foot stays put on either side of
    # it, so landing and takeoff frames are part of the contact interval
    speed = np.zeros((n, j))
    if n > 1:
        step = np.linalg.norm(np.diff(positions, axis=0), axis=2)
        backward = np.full((n, j), np.inf)
        forward = np.full((n, j), np.inf)
        backward[1:] = step
        forward[:-1] = step
        speed = np.minimum(backward, forward)
    height = positions[:, :, 1]
    contact = (speed < cfg.contact_velocity_threshold) & (
        height < cfg.contact_height_threshold
    )
    for f in feet:
        labels[:, f] = contact[:, f].astype(np.float64)
    return labels


# --- per-skeleton normalization -------------------------------------------


@dataclass
class NormalizationStats:
    """Per-joint feature mean/std pooled over all of a skeleton's motions.

    The contact flag is excluded (kept raw binary): its row is fixed to
    mean 0 / std 1. Stds are floored at ``epsilon``.
    """

    mean: np.ndarray  # (J, 13)
    std: np.ndarray  # (J, 13)
    epsilon: float = 1e-6

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape:
            raise ValueError("mean/std shape mismatch")
        if np.any(self.std < self.epsilon - 1e-12):
            raise ValueError("std entries must be >= epsilon")


def compute_stats(clips, epsilon: float = 1e-6) -> NormalizationStats:
    """Pooled mean/std over the valid frames of every clip of one skeleton."""
    if not clips:
        raise ValueError("at least one clip is required")
    stacked = np.concatenate([c.data[c.frame_mask] for c in clips], axis=0)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    mean[:, FC] = 0.0
    std[:, FC] = 1.0
    std = np.maximum(std, epsilon)
    return NormalizationStats(mean=mean, std=std, epsilon=epsilon)


def normalize(tensor: MotionTensor, stats: NormalizationStats) -> MotionTensor:
    out = tensor.copy()
    out.data = (out.data - stats.mean) / stats.std
    out.zero_padding()
    return out


def denormalize(tensor: MotionTensor, stats: NormalizationStats) -> MotionTensor:
    out = tensor.copy()
    out.data = out.data * stats.std + stats.mean
    out.zero_padding()
    return out


def stats_to_dict(stats: NormalizationStats) -> dict:
    return {
        "epsilon": stats.epsilon,
        "mean": stats.mean.tolist(),
        "std": stats.std.tolist(),
    }


def stats_from_dict(d: dict) -> NormalizationStats:
    return NormalizationStats(
        mean=np.asarray(d["mean"]), std=np.asarray(d["std"]), epsilon=d["epsilon"]
    )
