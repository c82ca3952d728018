"""Continuous 6D rotation representation and the geodesic rotation loss.

A rotation is encoded as the first two columns of its matrix; decoding runs
Gram-Schmidt on those columns and completes the frame with a cross product.
Functions accept torch tensors or numpy arrays and return the same kind.
"""

from __future__ import annotations

import numpy as np
import torch


class DegenerateRotationError(ValueError):
    """Raised in strict mode when the two 6D columns are (near) dependent."""


def _wrap(fn):
    def inner(x, *args, **kwargs):
        if isinstance(x, np.ndarray):
            out = fn(torch.as_tensor(x, dtype=torch.float64), *args, **kwargs)
            return out.numpy()
        return fn(x, *args, **kwargs)

    return inner


@_wrap
def rotation_6d_to_matrix(
    r6: torch.Tensor, strict: bool = False, eps: float = 1e-8
) -> torch.Tensor:
    """Gram-Schmidt decode of (..., 6) vectors into (..., 3, 3) matrices.

    The output is orthonormal with determinant +1. With ``strict`` a
    degenerate input (zero or linearly dependent columns) raises
    :class:`DegenerateRotationError`; otherwise it is epsilon-regularized.
    """
    if r6.shape[-1] != 6:
        raise ValueError(f"expected trailing dimension 6, got {r6.shape}")
    a = r6[..., 0:3]
    b = r6[..., 3:6]
    if strict:
        a_norm = torch.linalg.norm(a, dim=-1)
        if torch.any(a_norm < eps):
            raise DegenerateRotationError("first column is (near) zero")
    x = torch.nn.functional.normalize(a, dim=-1, eps=eps)
    dot = (x * b).sum(dim=-1, keepdim=True)
    y = b - dot * x
    if strict:
        y_norm = torch.linalg.norm(y, dim=-1)
        if torch.any(y_norm < eps):
            raise DegenerateRotationError("columns are (near) linearly dependent")
    y = torch.nn.functional.normalize(y, dim=-1, eps=eps)
    z = torch.cross(x, y, dim=-1)
    return torch.stack([x, y, z], dim=-1)


@_wrap
def matrix_to_rotation_6d(m: torch.Tensor) -> torch.Tensor:
    """First two columns of (..., 3, 3) matrices, flattened to (..., 6)."""
    if m.shape[-2:] != (3, 3):
        raise ValueError(f"expected trailing shape (3, 3), got {m.shape}")
    return torch.cat([m[..., :, 0], m[..., :, 1]], dim=-1)


def _geodesic_angles(
    r: torch.Tensor, r_hat: torch.Tensor, eps: float
) -> torch.Tensor:
    m = rotation_6d_to_matrix(r)
    m_hat = rotation_6d_to_matrix(r_hat)
    prod = m @ m_hat.transpose(-1, -2)
    trace = prod.diagonal(dim1=-2, dim2=-1).sum(-1)
    arg = (trace - 1.0) / 2.0
    angles = torch.arccos(torch.clamp(arg, -1.0, 1.0))
    if eps > 0:
        # straight-through: exact values, but gradients from the
        # eps-clamped path so arccos stays differentiable at the extremes
        safe = torch.arccos(torch.clamp(arg, -1.0 + eps, 1.0 - eps))
        angles = safe + (angles - safe).detach()
    return angles


def geodesic_loss(
    r,
    r_hat,
    frame_mask=None,
    joint_mask=None,
    eps: float = 0.0,
):
    """Sum of geodesic angles between two 6D rotation fields.

    ``r`` and ``r_hat`` are (..., frames, joints, 6); optional boolean masks
    select the valid frames/joints. Returns a scalar (torch if any input is
    torch, else float).
    """
    was_numpy = isinstance(r, np.ndarray) and isinstance(r_hat, np.ndarray)
    rt = torch.as_tensor(r, dtype=torch.float64) if isinstance(r, np.ndarray) else r
    ht = (
        torch.as_tensor(r_hat, dtype=torch.float64)
        if isinstance(r_hat, np.ndarray)
        else r_hat
    )
    angles = _geodesic_angles(rt, ht, eps)
    if frame_mask is not None:
        fm = torch.as_tensor(np.asarray(frame_mask), dtype=torch.bool)
        angles = angles * fm.to(angles.dtype).unsqueeze(-1)
    if joint_mask is not None:
        jm = torch.as_tensor(np.asarray(joint_mask), dtype=torch.bool)
        angles = angles * jm.to(angles.dtype).unsqueeze(-2)
    total = angles.sum()
    return float(total) if was_numpy else total
