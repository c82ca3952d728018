"""Conversion between joint-angle clips and the 13-feature motion tensor.

Non-root joints carry their root-relative world position, local 6D rotation,
the finite-difference velocity of that position, and a contact flag. The
root token reuses the same slots for its own conventions: height in the
position slot, global orientation in the rotation slot, and world linear
velocity, which makes the representation invertible for export.
"""

from __future__ import annotations

import numpy as np

from .motion import FC, POS, ROT, VEL, JointMotion, MotionTensor
from .rotations import (
    DegenerateRotationError,
    matrix_to_rotation_6d,
    rotation_6d_to_matrix,
)
from .skeleton import Skeleton


def forward_kinematics(
    skeleton: Skeleton, motion: JointMotion
) -> tuple[np.ndarray, np.ndarray]:
    """World positions (N, J, 3) and world rotations (N, J, 3, 3)."""
    topo = skeleton.topology
    n, j = motion.frame_count, motion.joint_count
    if j != skeleton.joint_count:
        raise ValueError("motion joint count does not match the skeleton")
    world_rot = np.empty((n, j, 3, 3))
    world_pos = np.empty((n, j, 3))
    world_rot[:, 0] = motion.rotations[:, 0]
    world_pos[:, 0] = motion.root_positions
    for i in range(1, j):
        p = int(topo.parent[i])
        world_rot[:, i] = world_rot[:, p] @ motion.rotations[:, i]
        world_pos[:, i] = world_pos[:, p] + np.einsum(
            "nab,b->na", world_rot[:, p], skeleton.rest.offsets[i]
        )
    return world_pos, world_rot


def _backward_difference(pos: np.ndarray, fps: float) -> np.ndarray:
    """Per-frame velocity (frame 0 is zero) scaled to units/second."""
    vel = np.zeros_like(pos)
    if pos.shape[0] > 1:
        vel[1:] = (pos[1:] - pos[:-1]) * fps
    return vel


def detect_contacts_for_clip(
    skeleton: Skeleton, motion: JointMotion, config=None
) -> np.ndarray:
    """Foot-contact labels for a clip, via forward kinematics."""
    from .preprocess import detect_foot_contacts

    world_pos, _ = forward_kinematics(skeleton, motion)
    return detect_foot_contacts(world_pos, skeleton.topology.feet, config)


def features_from_clip(
    skeleton: Skeleton, motion: JointMotion, contacts: np.ndarray | None = None
) -> MotionTensor:
    """Build the (N, J, 13) tensor from a preprocessed clip.

    ``contacts`` is an optional (N, J) binary label array; it defaults to
    all-zero (footless or airborne clips).
    """
    n, j = motion.frame_count, motion.joint_count
    if contacts is None:
        contacts = np.zeros((n, j))
    world_pos, _ = forward_kinematics(skeleton, motion)
    root = world_pos[:, 0]
    rel = world_pos - root[:, None, :]

    data = np.zeros((n, j, 13))
    data[:, :, POS] = rel
    data[:, 0, POS] = 0.0
    data[:, 0, 1] = root[:, 1]
    data[:, :, ROT] = matrix_to_rotation_6d(motion.rotations)
    data[:, 1:, VEL] = _backward_difference(rel[:, 1:], motion.fps)
    data[:, 0, VEL] = _backward_difference(root, motion.fps)
    data[:, :, FC] = contacts[:, :, None]
    return MotionTensor.from_data(data, skeleton=skeleton, fps=motion.fps)


def root_trajectory(tensor: MotionTensor) -> np.ndarray:
    """World root positions recovered from the root token.

    Height is read directly; the horizontal track is integrated from the
    stored velocity with the first frame at the origin.
    """
    n = tensor.data.shape[0]
    fps = tensor.fps
    root = np.zeros((n, 3))
    root[:, 1] = tensor.data[:, 0, 1]
    vel = tensor.data[:, 0, VEL]
    for t in range(1, n):
        root[t, 0] = root[t - 1, 0] + vel[t, 0] / fps
        root[t, 2] = root[t - 1, 2] + vel[t, 2] / fps
    return root


def clip_from_features(tensor: MotionTensor) -> JointMotion:
    """Decode a clean tensor back into a joint-angle clip.

    Degenerate rotation blocks are reported with their (frame, joint)
    indices rather than silently regularized.
    """
    valid = tensor.data[tensor.frame_mask][:, tensor.joint_mask]
    r6 = valid[:, :, ROT]
    first = r6[:, :, 0:3]
    second = r6[:, :, 3:6]
    x = first / np.maximum(np.linalg.norm(first, axis=-1, keepdims=True), 1e-12)
    residual = second - (x * second).sum(-1, keepdims=True) * x
    bad = (np.linalg.norm(first, axis=-1) < 1e-8) | (
        np.linalg.norm(residual, axis=-1) < 1e-8
    )
    if np.any(bad):
        where = [tuple(int(v) for v in idx) for idx in np.argwhere(bad)[:8]]
        raise DegenerateRotationError(
            f"degenerate rotation blocks at (frame, joint) {where}"
        )
    rotations = rotation_6d_to_matrix(r6)
    sub = MotionTensor.from_data(valid, skeleton=tensor.skeleton, fps=tensor.fps)
    root = root_trajectory(sub)
    return JointMotion(root_positions=root, rotations=rotations, fps=tensor.fps)


def footlock_cleanup(tensor: MotionTensor, blend_frames: int = 3) -> MotionTensor:
    """Pin each foot to its position at contact onset for the whole interval.

    Contact intervals come from the stored labels. Corrections are applied to
    the root-relative position slots only (rotations untouched) and blended
    out linearly over a few frames on each side of the interval; the foot's
    velocity slots are recomputed to stay consistent.
    """
    out = tensor.copy()
    skeleton = tensor.skeleton
    if skeleton is None or not skeleton.topology.feet:
        return out
    valid_frames = np.nonzero(tensor.frame_mask)[0]
    if len(valid_frames) == 0:
        return out
    rows = valid_frames
    root = root_trajectory(
        MotionTensor.from_data(
            tensor.data[rows], skeleton=skeleton, fps=tensor.fps
        )
    )
    for foot in sorted(skeleton.topology.feet):
        if not tensor.joint_mask[foot]:
            continue
        labels = tensor.data[rows, foot, 12] > 0.5
        if not labels.any():
            continue
        world = root + tensor.data[rows, foot, POS]
        delta = np.zeros_like(world)
        t = 0
        n = len(rows)
        while t < n:
            if not labels[t]:
                t += 1
                continue
            start = t
            while t < n and labels[t]:
                t += 1
            end = t  # exclusive
            pinned = world[start]
            delta[start:end] = pinned - world[start:end]
            # fade the correction out after the interval ends
            tail = delta[end - 1]
            for k in range(1, blend_frames + 1):
                idx = end - 1 + k
                if idx >= n or labels[idx]:
                    break
                fade = 1.0 - k / float(blend_frames + 1)
                delta[idx] += tail * fade
        new_world = world + delta
        out.data[rows, foot, POS] = new_world - root
        rel = out.data[rows, foot, POS]
        out.data[rows, foot, VEL] = _backward_difference(rel, tensor.fps)
    out.zero_padding()
    return out
