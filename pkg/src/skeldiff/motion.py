"""Per-joint motion feature tensors and the joint-angle clip they encode.

The canonical learned representation is a (frames, joints, 13) tensor with
fixed feature slices: root-relative position, 6D rotation, linear velocity,
and a binary foot-contact flag. Frame and joint validity masks mark padding;
padded entries are kept exactly zero by every operation in the package.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

POS = slice(0, 3)
ROT = slice(3, 9)
VEL = slice(9, 12)
FC = slice(12, 13)

FEATURE_DIM = 13

LAYOUT_VERSION = 1


@dataclass
class JointMotion:
    """A joint-angle clip: root trajectory plus local rotation matrices.

    ``root_positions`` is (frames, 3) in world space, ``rotations`` is
    (frames, joints, 3, 3) parent-relative (the root's rotation is global).
    """

    root_positions: np.ndarray
    rotations: np.ndarray
    fps: float = 30.0

    def __post_init__(self):
        self.root_positions = np.asarray(self.root_positions, dtype=np.float64)
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        if self.rotations.ndim != 4 or self.rotations.shape[-2:] != (3, 3):
            raise ValueError(f"rotations must be (N, J, 3, 3), got {self.rotations.shape}")
        if self.root_positions.shape != (self.rotations.shape[0], 3):
            raise ValueError("root_positions must be (N, 3) matching rotations")
        if self.fps <= 0:
            raise ValueError("fps must be positive")

    @property
    def frame_count(self) -> int:
        return self.rotations.shape[0]

    @property
    def joint_count(self) -> int:
        return self.rotations.shape[1]


@dataclass
class MotionTensor:
    """(frames, joints, 13) feature tensor with validity masks."""

    data: np.ndarray
    frame_mask: np.ndarray
    joint_mask: np.ndarray
    skeleton: object = None
    fps: float = 30.0
    crop_index: int = 0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != FEATURE_DIM:
            raise ValueError(f"data must be (N, J, {FEATURE_DIM}), got {self.data.shape}")
        self.frame_mask = np.asarray(self.frame_mask, dtype=bool)
        self.joint_mask = np.asarray(self.joint_mask, dtype=bool)
        if self.frame_mask.shape != (self.data.shape[0],):
            raise ValueError("frame_mask must have one entry per frame")
        if self.joint_mask.shape != (self.data.shape[1],):
            raise ValueError("joint_mask must have one entry per joint")

    @classmethod
    def from_data(cls, data, skeleton=None, fps: float = 30.0) -> "MotionTensor":
        data = np.asarray(data, dtype=np.float64)
        return cls(
            data=data,
            frame_mask=np.ones(data.shape[0], dtype=bool),
            joint_mask=np.ones(data.shape[1], dtype=bool),
            skeleton=skeleton,
            fps=fps,
        )

    @property
    def n_frames(self) -> int:
        return int(self.frame_mask.sum())

    @property
    def n_joints(self) -> int:
        return int(self.joint_mask.sum())

    def mask_array(self) -> np.ndarray:
        """(N, J, 1) float mask of valid positions."""
        m = self.frame_mask[:, None] & self.joint_mask[None, :]
        return m[:, :, None].astype(np.float64)

    def valid(self) -> np.ndarray:
        """Data restricted to valid frames and joints."""
        return self.data[self.frame_mask][:, self.joint_mask]

    def copy(self) -> "MotionTensor":
        return MotionTensor(
            data=self.data.copy(),
            frame_mask=self.frame_mask.copy(),
            joint_mask=self.joint_mask.copy(),
            skeleton=self.skeleton,
            fps=self.fps,
            crop_index=self.crop_index,
        )

    def zero_padding(self) -> None:
        """Force padded entries to exactly zero, in place."""
        self.data *= self.mask_array()


def pad(tensor: MotionTensor, n_max: int, j_max: int) -> MotionTensor:
    """Zero-pad to (n_max, j_max) frames/joints, extending the masks."""
    n, j, _ = tensor.data.shape
    if n_max < n or j_max < j:
        raise ValueError("pad target must not be smaller than the tensor")
    data = np.zeros((n_max, j_max, FEATURE_DIM))
    data[:n, :j] = tensor.data
    frame_mask = np.zeros(n_max, dtype=bool)
    frame_mask[:n] = tensor.frame_mask
    joint_mask = np.zeros(j_max, dtype=bool)
    joint_mask[:j] = tensor.joint_mask
    return MotionTensor(
        data=data,
        frame_mask=frame_mask,
        joint_mask=joint_mask,
        skeleton=tensor.skeleton,
        fps=tensor.fps,
        crop_index=tensor.crop_index,
    )


def crop_window(
    tensor: MotionTensor, start: int, length: int = 40
) -> tuple[MotionTensor, int]:
    """Take ``length`` frames beginning at ``start`` from the valid region.

    The start index is kept (also on the returned tensor) so the temporal
    positional encoding can stay relative to the original clip.
    """
    if start < 0 or length < 1 or start + length > tensor.n_frames:
        raise ValueError(
            f"crop [{start}, {start + length}) out of range for {tensor.n_frames} valid frames"
        )
    valid_idx = np.nonzero(tensor.frame_mask)[0]
    rows = valid_idx[start : start + length]
    out = MotionTensor(
        data=tensor.data[rows].copy(),
        frame_mask=np.ones(length, dtype=bool),
        joint_mask=tensor.joint_mask.copy(),
        skeleton=tensor.skeleton,
        fps=tensor.fps,
        crop_index=start,
    )
    return out, start


def save_motion(path, tensor: MotionTensor) -> None:
    """Write the binary container (.npz with layout version and masks)."""
    np.savez(
        path,
        layout_version=np.int64(LAYOUT_VERSION),
        data=tensor.data,
        frame_mask=tensor.frame_mask,
        joint_mask=tensor.joint_mask,
        fps=np.float64(tensor.fps),
        crop_index=np.int64(tensor.crop_index),
    )


def load_motion(path, skeleton=None) -> MotionTensor:
    with np.load(path) as z:
        version = int(z["layout_version"])
        if version != LAYOUT_VERSION:
            raise ValueError(f"unsupported motion container version {version}")
        return MotionTensor(
            data=z["data"],
            frame_mask=z["frame_mask"],
            joint_mask=z["joint_mask"],
            skeleton=skeleton,
            fps=float(z["fps"]),
            crop_index=int(z["crop_index"]),
        )
