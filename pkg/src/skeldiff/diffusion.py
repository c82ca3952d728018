"""DDPM machinery: schedules, forward noising, losses, sampling, editing,
and diffusion-feature extraction.

The denoiser is parameterized to predict the clean motion, so ancestral
sampling forms the posterior mean from the prediction and the current noisy
sample at every step. Editing overrides the prediction on a fixed token
subset each iteration, which pins those tokens in the final output exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch

from .denoiser import Denoiser, SkeletonBatch
from .motion import ROT, MotionTensor
from .preprocess import NormalizationStats
from .rotations import geodesic_loss
from .skeleton import Skeleton


@dataclass
class NoiseSchedule:
    """Step count plus beta / alpha / cumulative-alpha tables (index t-1)."""

    steps: int
    betas: np.ndarray
    kind: str = "cosine"

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if self.betas.shape != (self.steps,):
            raise ValueError("one beta per step is required")
        if np.any(self.betas <= 0) or np.any(self.betas >= 1):
            raise ValueError("betas must lie strictly inside (0, 1)")
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    @classmethod
    def cosine(cls, steps: int = 100, s: float = 0.008) -> "NoiseSchedule":
        t = np.arange(steps + 1, dtype=np.float64)
        f = np.cos((t / steps + s) / (1.0 + s) * np.pi / 2.0) ** 2
        abar = f / f[0]
        betas = np.clip(1.0 - abar[1:] / abar[:-1], 1e-8, 0.999)
        return cls(steps=steps, betas=betas, kind="cosine")

    @classmethod
    def linear(
        cls, steps: int = 100, beta_start: float = 1e-4, beta_end: float = 0.02
    ) -> "NoiseSchedule":
        betas = np.linspace(beta_start, beta_end, steps)
        return cls(steps=steps, betas=betas, kind="linear")

    def alpha_bar(self, t: int) -> float:
        """Cumulative alpha at step t, with the t=0 extension equal to 1."""
        if t == 0:
            return 1.0
        return float(self.alpha_bars[t - 1])

    def posterior(self, t: int) -> tuple[float, float, float]:
        """Coefficients (on the prediction, on x_t) and the variance of the
        reverse-step posterior q(x_{t-1} | x_t, x_0)."""
        if not (1 <= t <= self.steps):
            raise ValueError(f"step {t} out of range [1, {self.steps}]")
        abar_t = self.alpha_bar(t)
        abar_prev = self.alpha_bar(t - 1)
        beta_t = float(self.betas[t - 1])
        alpha_t = float(self.alphas[t - 1])
        coef_pred = np.sqrt(abar_prev) * beta_t / (1.0 - abar_t)
        coef_xt = np.sqrt(alpha_t) * (1.0 - abar_prev) / (1.0 - abar_t)
        variance = (1.0 - abar_prev) / (1.0 - abar_t) * beta_t
        return float(coef_pred), float(coef_xt), float(variance)


@dataclass
class LossWeights:
    """Weight of the geodesic rotation term in the total objective.

    ``rot_reduction`` chooses between the raw sum over valid (frame, joint)
    entries and its per-element mean; the mean keeps the two terms on
    comparable scales, which matters because the reconstruction term is
    itself a mean.
    """

    rot: float = 1.0
    rot_reduction: str = "mean"

    def __post_init__(self):
        if not np.isfinite(self.rot) or self.rot < 0:
            raise ValueError("rotation weight must be finite and nonnegative")
        if self.rot_reduction not in ("mean", "sum"):
            raise ValueError("rot_reduction must be 'mean' or 'sum'")


def _apply_masks(x, frame_mask, joint_mask):
    if frame_mask is not None:
        fm = frame_mask if torch.is_tensor(x) else np.asarray(frame_mask)
        x = x * _as_like(fm, x).reshape(*fm.shape, 1, 1)
    if joint_mask is not None:
        jm = joint_mask if torch.is_tensor(x) else np.asarray(joint_mask)
        shaped = _as_like(jm, x)
        x = x * shaped.reshape(*jm.shape[:-1], 1, jm.shape[-1], 1)
    return x


def _as_like(mask, x):
    if torch.is_tensor(x):
        return torch.as_tensor(mask, device=x.device).to(x.dtype)
    return np.asarray(mask, dtype=x.dtype)


def q_sample(x0, t, noise, schedule: NoiseSchedule, frame_mask=None, joint_mask=None):
    """Forward-noise x0 to step t: sqrt(abar_t) x0 + sqrt(1 - abar_t) noise.

    Works on torch tensors or numpy arrays; ``t`` may be an int or a (B,)
    tensor of per-sample steps. Padded entries stay exactly zero when masks
    are given.
    """
    if torch.is_tensor(t):
        if torch.any(t < 1) or torch.any(t > schedule.steps):
            raise ValueError(f"step out of range [1, {schedule.steps}]")
        abars = torch.as_tensor(
            schedule.alpha_bars, dtype=x0.dtype, device=x0.device
        )[t - 1]
        while abars.dim() < x0.dim():
            abars = abars.unsqueeze(-1)
        out = torch.sqrt(abars) * x0 + torch.sqrt(1.0 - abars) * noise
    else:
        t = int(t)
        if not (1 <= t <= schedule.steps):
            raise ValueError(f"step {t} out of range [1, {schedule.steps}]")
        ab = schedule.alpha_bar(t)
        out = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise
    return _apply_masks(out, frame_mask, joint_mask)


def training_loss(
    model: Callable,
    x0: torch.Tensor,
    cond: SkeletonBatch,
    t: torch.Tensor,
    noise: torch.Tensor,
    schedule: NoiseSchedule,
    weights: LossWeights = LossWeights(),
    frame_mask: Optional[torch.Tensor] = None,
    crop_index=0,
):
    """Total objective and its components for one batch.

    The reconstruction term is the mean squared error over valid entries
    between the model's clean-motion prediction and x0; the rotation term is
    the geodesic loss over the 6D rotation slices of the same pair.
    """
    b, n, j, d = x0.shape
    if frame_mask is None:
        frame_mask = torch.ones(b, n, dtype=torch.bool, device=x0.device)
    x_t = q_sample(x0, t, noise, schedule, frame_mask, cond.joint_mask)
    out = model(x_t, t, cond, crop_index, frame_mask)

    valid = (frame_mask[:, :, None] & cond.joint_mask[:, None, :]).to(x0.dtype)
    count = valid.sum() * d
    l_simple = (((out - x0) ** 2) * valid.unsqueeze(-1)).sum() / count
    l_rot = geodesic_loss(
        x0[..., ROT],
        out[..., ROT],
        frame_mask=frame_mask,
        joint_mask=cond.joint_mask,
        eps=1e-7,
    )
    if weights.rot_reduction == "mean":
        l_rot = l_rot / valid.sum()
    total = l_simple + weights.rot * l_rot
    components = {
        "simple": float(l_simple.detach()),
        "rot": float(l_rot.detach()),
    }
    return total, components


def _normalize_array(data: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    return (data - stats.mean) / stats.std


def edit_sample(
    model: Denoiser,
    schedule: NoiseSchedule,
    skeleton: Skeleton,
    n_frames: int,
    fixed_mask: Optional[np.ndarray] = None,
    fixed_values: Optional[np.ndarray] = None,
    stats: Optional[NormalizationStats] = None,
    seed: int = 0,
    fps: float = 30.0,
    threshold_contacts: bool = True,
    crop_index: int = 0,
) -> MotionTensor:
    """Ancestral sampling with an optional per-iteration override.

    ``fixed_mask`` is a boolean (n_frames, joints) token selector;
    ``fixed_values`` supplies full feature rows on that subset (in the same
    space as the returned motion). The fixed subset of the output is
    bit-identical to ``fixed_values``. With no mask this is plain sampling.
    """
    j = skeleton.joint_count
    cond = model.make_condition([skeleton])
    dtype = model.dtype

    fixed_norm = None
    mask_t = None
    if fixed_mask is not None:
        fixed_mask = np.asarray(fixed_mask, dtype=bool)
        if fixed_mask.shape != (n_frames, j):
            raise ValueError(
                f"fixed mask must be ({n_frames}, {j}), got {fixed_mask.shape}"
            )
        if fixed_values is None:
            raise ValueError("fixed_values are required with a fixed_mask")
        fixed_values = np.asarray(fixed_values, dtype=np.float64)
        if fixed_values.shape != (n_frames, j, 13):
            raise ValueError(
                f"fixed values must be ({n_frames}, {j}, 13), got {fixed_values.shape}"
            )
        norm_vals = (
            _normalize_array(fixed_values, stats) if stats is not None else fixed_values
        )
        fixed_norm = torch.as_tensor(norm_vals, dtype=dtype).unsqueeze(0)
        mask_t = torch.as_tensor(fixed_mask).unsqueeze(0).unsqueeze(-1)

    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(1, n_frames, j, 13, generator=gen, dtype=dtype)
    for t in range(schedule.steps, 0, -1):
        with torch.no_grad():
            pred = model(x, t, cond, crop_index=crop_index)
        if fixed_norm is not None:
            pred = torch.where(mask_t, fixed_norm, pred)
        if t > 1:
            coef_pred, coef_xt, variance = schedule.posterior(t)
            noise = torch.randn(x.shape, generator=gen, dtype=dtype)
            x = coef_pred * pred + coef_xt * x + np.sqrt(variance) * noise
        else:
            x = pred

    data = x.squeeze(0).numpy().astype(np.float64)
    if stats is not None:
        data = data * stats.std + stats.mean
    if threshold_contacts:
        data[..., 12] = (data[..., 12] > 0.5).astype(np.float64)
    if fixed_mask is not None:
        data[fixed_mask] = fixed_values[fixed_mask]
    return MotionTensor.from_data(data, skeleton=skeleton, fps=fps)


def sample(
    model: Denoiser,
    schedule: NoiseSchedule,
    skeleton: Skeleton,
    n_frames: int,
    stats: Optional[NormalizationStats] = None,
    seed: int = 0,
    fps: float = 30.0,
    threshold_contacts: bool = True,
    crop_index: int = 0,
) -> MotionTensor:
    """Generate a clean motion for the skeleton from pure noise.

    ``crop_index`` offsets the temporal positional encoding, generating the
    segment that would start at that frame of a longer sequence.
    """
    return edit_sample(
        model,
        schedule,
        skeleton,
        n_frames,
        stats=stats,
        seed=seed,
        fps=fps,
        threshold_contacts=threshold_contacts,
        crop_index=crop_index,
    )


def dift_features(
    model: Denoiser,
    schedule: NoiseSchedule,
    tensor: MotionTensor,
    skeleton: Optional[Skeleton] = None,
    t_corr: int = 2,
    l_corr: int = 0,
    seed: int = 0,
    stats: Optional[NormalizationStats] = None,
    noise: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Diffusion features: noise the clip directly to ``t_corr``, run one
    denoising pass, and return the captured layer-``l_corr`` activations
    (frames, joints, latent).

    ``noise`` overrides the seeded draw; useful when two extractions must
    share the exact same perturbation.
    """
    skeleton = skeleton if skeleton is not None else tensor.skeleton
    if skeleton is None:
        raise ValueError("a skeleton is required")
    if not (1 <= t_corr <= schedule.steps):
        raise ValueError(f"t_corr out of range [1, {schedule.steps}]")
    data = tensor.data
    if stats is not None:
        data = _normalize_array(data, stats) * tensor.mask_array()
    dtype = model.dtype
    x0 = torch.as_tensor(data, dtype=dtype).unsqueeze(0)
    frame_mask = torch.as_tensor(tensor.frame_mask).unsqueeze(0)
    cond = model.make_condition([skeleton], j_max=tensor.data.shape[1])
    cond.joint_mask = torch.as_tensor(tensor.joint_mask).unsqueeze(0)

    if noise is None:
        gen = torch.Generator().manual_seed(seed)
        noise_t = torch.randn(x0.shape, generator=gen, dtype=dtype)
    else:
        noise_t = torch.as_tensor(noise, dtype=dtype).reshape(x0.shape)
    x_t = q_sample(x0, t_corr, noise_t, schedule, frame_mask, cond.joint_mask)

    tap = model.capture_activations(l_corr)
    with torch.no_grad():
        model(
            x_t,
            t_corr,
            cond,
            crop_index=tensor.crop_index,
            frame_mask=frame_mask,
            tap=tap,
        )
    return tap.activations.squeeze(0).numpy().astype(np.float64)
