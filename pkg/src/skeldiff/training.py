"""Dataset assembly, balanced sampling, augmentation lifting, and the
optimization loop with self-describing checkpoints."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import torch

from .denoiser import Denoiser, SkeletonBatch
from .diffusion import LossWeights, NoiseSchedule, training_loss
from .motion import POS, ROT, VEL, MotionTensor, crop_window, load_motion
from .preprocess import NormalizationStats, normalize, stats_from_dict
from .rotations import matrix_to_rotation_6d, rotation_6d_to_matrix
from .skeleton import (
    IDENTITY_6D,
    AugmentResult,
    Skeleton,
    augment_add,
    augment_remove,
    load_skeleton_text,
    save_skeleton_text,
)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class DatasetEntry:
    skeleton_id: str
    skeleton: Skeleton
    clips: list[MotionTensor]
    stats: NormalizationStats


@dataclass
class Dataset:
    entries: list[DatasetEntry]

    def __post_init__(self):
        if not self.entries:
            raise ValueError("dataset is empty")
        for e in self.entries:
            if not e.clips:
                raise ValueError(f"skeleton {e.skeleton_id} has no clips")

    @property
    def k(self) -> int:
        return len(self.entries)

    @property
    def clip_counts(self) -> list[int]:
        return [len(e.clips) for e in self.entries]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for e in self.entries:
            h.update(e.skeleton_id.encode())
            h.update(save_skeleton_text(e.skeleton).encode())
            for c in e.clips:
                h.update(np.ascontiguousarray(c.data).tobytes())
        return h.hexdigest()

    @classmethod
    def load(cls, data_dir) -> "Dataset":
        """Read a preprocessed dataset directory (see the CLI module)."""
        data_dir = Path(data_dir)
        index = json.loads((data_dir / "index.json").read_text())
        entries = []
        for skel_id in sorted(index["skeletons"]):
            info = index["skeletons"][skel_id]
            sdir = data_dir / skel_id
            skeleton = load_skeleton_text((sdir / "skeleton.txt").read_text())
            stats = stats_from_dict(json.loads((sdir / "stats.json").read_text()))
            clips = [
                load_motion(sdir / f"{name}.motion.npz", skeleton=skeleton)
                for name in info["clips"]
            ]
            entries.append(
                DatasetEntry(
                    skeleton_id=skel_id, skeleton=skeleton, clips=clips, stats=stats
                )
            )
        return cls(entries)


@dataclass
class TrainConfig:
    batch_size: int = 16
    crop_length: int = 40
    learning_rate: float = 1e-4
    total_steps: int = 1000
    lambda_rot: float = 1.0
    remove_prob: float = 0.3
    add_prob: float = 0.3
    seed: int = 0
    checkpoint_every: int = 0  # 0 keeps only the final checkpoint
    log_every: int = 50

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.crop_length < 2:
            raise ValueError("crop length must be >= 2")


def balanced_batches(
    dataset: Dataset, rng: np.random.Generator, batch_size: int
) -> Iterator[list[tuple[int, int]]]:
    """I.i.d. batches of (skeleton index, clip index) draws where each clip
    of skeleton type i has probability 1 / (n_i * k).

    Every skeleton type carries mass exactly 1/k no matter how many clips it
    has; the draw is a uniform type followed by a uniform clip within it.
    """
    k = dataset.k
    counts = dataset.clip_counts
    if k < 1 or min(counts) < 1:
        raise ValueError("dataset must have at least one clip per type")
    while True:
        types = rng.integers(0, k, size=batch_size)
        batch = [(int(ti), int(rng.integers(0, counts[ti]))) for ti in types]
        yield batch


def clip_sampling_probability(dataset: Dataset, type_index: int) -> float:
    """The per-clip probability assigned by the balancing sampler."""
    return 1.0 / (len(dataset.entries[type_index].clips) * dataset.k)


# --- lifting skeletal augmentations onto motion tensors --------------------


@dataclass
class AugmentConfig:
    remove_prob: float = 0.3
    add_prob: float = 0.3
    remove_fraction: tuple[float, float] = (0.10, 0.30)


def _removed_chain(old_parent, removed: set[int], j: int) -> list[int]:
    """Removed ancestors of j from nearest-survivor side down to j's parent."""
    chain = []
    p = int(old_parent[j])
    while p in removed:
        chain.append(p)
        p = int(old_parent[p])
    return list(reversed(chain))


def _lift_removal(
    clip: MotionTensor, skeleton: Skeleton, result: AugmentResult
) -> MotionTensor:
    old_parent = skeleton.topology.parent
    removed = {j for j in range(skeleton.joint_count) if result.index_map[j] < 0}
    keep = [j for j in range(skeleton.joint_count) if result.index_map[j] >= 0]
    data = clip.data[:, keep].copy()
    for new_idx, old_idx in enumerate(keep):
        chain = _removed_chain(old_parent, removed, old_idx)
        if not chain:
            continue
        # compose the removed parents' rotations into the surviving child
        composed = rotation_6d_to_matrix(clip.data[:, chain[0], ROT])
        for r in chain[1:]:
            composed = composed @ rotation_6d_to_matrix(clip.data[:, r, ROT])
        own = rotation_6d_to_matrix(clip.data[:, old_idx, ROT])
        data[:, new_idx, ROT] = matrix_to_rotation_6d(composed @ own)
    return MotionTensor(
        data=data,
        frame_mask=clip.frame_mask.copy(),
        joint_mask=np.ones(len(keep), dtype=bool),
        skeleton=result.skeleton,
        fps=clip.fps,
        crop_index=clip.crop_index,
    )


def _lift_addition(
    clip: MotionTensor, skeleton: Skeleton, result: AugmentResult
) -> MotionTensor:
    child = result.new_joint
    parent = int(skeleton.topology.parent[child])
    n = clip.data.shape[0]
    j = skeleton.joint_count
    data = np.zeros((n, j + 1, 13))
    for old in range(j):
        data[:, int(result.index_map[old])] = clip.data[:, old]
    parent_rel = (
        np.zeros((n, 3)) if parent == 0 else clip.data[:, parent, POS]
    )
    midpoint = 0.5 * (parent_rel + clip.data[:, child, POS])
    new_idx = child  # the midpoint takes the child's old index
    data[:, new_idx, POS] = midpoint
    data[:, new_idx, ROT] = IDENTITY_6D
    vel = np.zeros_like(midpoint)
    if n > 1:
        vel[1:] = (midpoint[1:] - midpoint[:-1]) * clip.fps
    data[:, new_idx, VEL] = vel
    return MotionTensor(
        data=data,
        frame_mask=clip.frame_mask.copy(),
        joint_mask=np.ones(j + 1, dtype=bool),
        skeleton=result.skeleton,
        fps=clip.fps,
        crop_index=clip.crop_index,
    )


def _adapt_stats_removal(stats, result: AugmentResult) -> NormalizationStats:
    keep = np.nonzero(result.index_map >= 0)[0]
    return NormalizationStats(
        mean=stats.mean[keep], std=stats.std[keep], epsilon=stats.epsilon
    )


def _adapt_stats_addition(
    stats, skeleton: Skeleton, result: AugmentResult
) -> NormalizationStats:
    child = result.new_joint
    parent = int(skeleton.topology.parent[child])
    mean_row = 0.5 * (stats.mean[parent] + stats.mean[child])
    std_row = 0.5 * (stats.std[parent] + stats.std[child])
    j = stats.mean.shape[0]
    mean = np.zeros((j + 1, stats.mean.shape[1]))
    std = np.ones((j + 1, stats.std.shape[1]))
    for old in range(j):
        new_idx = int(result.index_map[old])
        mean[new_idx] = stats.mean[old]
        std[new_idx] = stats.std[old]
    mean[child] = mean_row
    std[child] = std_row
    return NormalizationStats(mean=mean, std=std, epsilon=stats.epsilon)


def augment_sample(
    clip: MotionTensor,
    skeleton: Skeleton,
    rng: np.random.Generator,
    config: AugmentConfig | None = None,
    stats: Optional[NormalizationStats] = None,
):
    """Apply skeletal augmentations to a clip/skeleton pair (and adapt the
    per-joint normalization stats when supplied).

    Joint removal drops the removed joints' motion channels and composes
    their rotations into reattached children. Joint addition gives the new
    midpoint joint interpolated positions, an identity local rotation, and
    recomputed velocities.
    """
    cfg = config or AugmentConfig()
    if not np.all(clip.joint_mask):
        raise ValueError("augmentation expects an unpadded clip")

    if rng.random() < cfg.remove_prob:
        fraction = float(rng.uniform(*cfg.remove_fraction))
        result = augment_remove(skeleton.topology, skeleton, rng, fraction)
        if result.applied:
            clip = _lift_removal(clip, skeleton, result)
            if stats is not None:
                stats = _adapt_stats_removal(stats, result)
            skeleton = result.skeleton

    if rng.random() < cfg.add_prob:
        result = augment_add(skeleton.topology, skeleton, rng)
        clip = _lift_addition(clip, skeleton, result)
        if stats is not None:
            stats = _adapt_stats_addition(stats, skeleton, result)
        skeleton = result.skeleton

    return clip, skeleton, stats


# --- checkpoints ------------------------------------------------------------


@dataclass
class CheckpointManifest:
    step: int
    config: dict
    denoiser_config: dict
    parameter_shapes: dict
    dataset_fingerprint: str
    metrics: dict = field(default_factory=dict)
    stats_reference: str = ""

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CheckpointManifest":
        return cls(**json.loads(text))


def save_checkpoint(
    out_dir,
    model: Denoiser,
    optimizer,
    step: int,
    train_config: TrainConfig,
    dataset_fingerprint: str,
    rng: np.random.Generator,
    metrics: Optional[dict] = None,
    stats_reference: str = "",
) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = CheckpointManifest(
        step=step,
        config=dataclasses.asdict(train_config),
        denoiser_config=dataclasses.asdict(model.config),
        parameter_shapes=model.parameter_shapes(),
        dataset_fingerprint=dataset_fingerprint,
        metrics=metrics or {},
        stats_reference=stats_reference,
    )
    state = {
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "torch_rng": torch.get_rng_state(),
        "numpy_rng": rng.bit_generator.state,
        "step": step,
    }
    torch.save(state, out_dir / "state.pt")
    tmp = out_dir / "manifest.json.tmp"
    tmp.write_text(manifest.to_json())
    tmp.replace(out_dir / "manifest.json")
    return out_dir


def load_checkpoint(path, model: Denoiser, optimizer=None):
    """Restore model (and optionally optimizer/RNG) state; returns the
    manifest and the saved step."""
    path = Path(path)
    manifest = CheckpointManifest.from_json((path / "manifest.json").read_text())
    state = torch.load(path / "state.pt", weights_only=False)
    model.load_state_dict(state["model"])
    if optimizer is not None and state["optimizer"] is not None:
        optimizer.load_state_dict(state["optimizer"])
    return manifest, state


@dataclass
class TrainResult:
    steps: int
    history: list[dict]
    checkpoint_dir: Optional[Path]


def _prepare_item(
    entry: DatasetEntry,
    clip_index: int,
    rng: np.random.Generator,
    config: TrainConfig,
    augment_cfg: Optional[AugmentConfig],
):
    clip = entry.clips[clip_index]
    skeleton = entry.skeleton
    stats = entry.stats
    if augment_cfg is not None:
        clip, skeleton, stats = augment_sample(
            clip, skeleton, rng, augment_cfg, stats
        )
    n_valid = clip.n_frames
    if n_valid > config.crop_length:
        start = int(rng.integers(0, n_valid - config.crop_length + 1))
        clip, crop_idx = crop_window(clip, start, config.crop_length)
    else:
        clip, crop_idx = clip.copy(), 0
        clip.crop_index = 0
    return normalize(clip, stats), skeleton, crop_idx


def train(
    dataset: Dataset,
    model: Denoiser,
    config: TrainConfig,
    schedule: Optional[NoiseSchedule] = None,
    out_dir=None,
    resume_from=None,
    augment: bool = True,
) -> TrainResult:
    """Optimization loop: balanced batches, augmentation, random crops,
    normalization, uniform diffusion steps, gradient updates.

    A non-finite loss aborts with the offending step, batch, and diffusion
    steps in the exception. Runs are deterministic for a given seed; resume
    restores the numpy and torch RNG states saved in the checkpoint, so a
    resumed run continues the uninterrupted trajectory exactly.
    """
    schedule = schedule or NoiseSchedule.cosine(model.config.steps)
    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    weights = LossWeights(rot=config.lambda_rot)
    augment_cfg = (
        AugmentConfig(remove_prob=config.remove_prob, add_prob=config.add_prob)
        if augment
        else None
    )
    start_step = 0
    if resume_from is not None:
        _, state = load_checkpoint(resume_from, model, optimizer)
        torch.set_rng_state(state["torch_rng"])
        rng.bit_generator.state = state["numpy_rng"]
        start_step = state["step"]

    fingerprint = dataset.fingerprint()
    batches = balanced_batches(dataset, rng, config.batch_size)
    history: list[dict] = []
    log_path = Path(out_dir) / "loss_log.txt" if out_dir is not None else None
    if log_path is not None:
        log_path.parent.mkdir(parents=True, exist_ok=True)

    dtype = model.dtype
    last_dir = None
    for step in range(start_step, config.total_steps):
        batch = next(batches)
        items = [
            _prepare_item(dataset.entries[ti], ci, rng, config, augment_cfg)
            for ti, ci in batch
        ]
        b = len(items)
        j_max = max(skel.joint_count for _, skel, _ in items)
        n_max = config.crop_length
        x0 = torch.zeros(b, n_max, j_max, 13, dtype=dtype)
        frame_mask = torch.zeros(b, n_max, dtype=torch.bool)
        crop_idx = torch.zeros(b, dtype=torch.long)
        for i, (clip, _, ci) in enumerate(items):
            n = clip.data.shape[0]
            jj = clip.data.shape[1]
            x0[i, :n, :jj] = torch.as_tensor(clip.data, dtype=dtype)
            frame_mask[i, :n] = torch.as_tensor(clip.frame_mask)
            crop_idx[i] = ci
        cond = SkeletonBatch.from_skeletons(
            [skel for _, skel, _ in items],
            model.name_embedder,
            j_max=j_max,
            dtype=dtype,
            d_max=model.config.d_max,
        )
        t = torch.as_tensor(
            rng.integers(1, schedule.steps + 1, size=b), dtype=torch.long
        )
        noise = torch.randn(x0.shape, dtype=dtype)

        loss, components = training_loss(
            model, x0, cond, t, noise, schedule, weights, frame_mask, crop_idx
        )
        if not torch.isfinite(loss):
            raise TrainingDivergedError(
                f"non-finite loss at step {step}: components={components}, "
                f"batch={batch}, t={t.tolist()}"
            )
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

        record = {"step": step, "total": float(loss.detach()), **components}
        if step % config.log_every == 0 or step == config.total_steps - 1:
            history.append(record)
            if log_path is not None:
                with open(log_path, "a") as f:
                    f.write(
                        f"{record['step']} {record['simple']:.6f} "
                        f"{record['rot']:.6f} {record['total']:.6f}\n"
                    )
        if (
            out_dir is not None
            and config.checkpoint_every > 0
            and (step + 1) % config.checkpoint_every == 0
        ):
            last_dir = save_checkpoint(
                Path(out_dir) / f"step_{step + 1:07d}",
                model,
                optimizer,
                step + 1,
                config,
                fingerprint,
                rng,
                metrics=record,
            )

    if out_dir is not None:
        last_dir = save_checkpoint(
            Path(out_dir) / "final",
            model,
            optimizer,
            config.total_steps,
            config,
            fingerprint,
            rng,
            metrics=history[-1] if history else {},
        )
    return TrainResult(
        steps=config.total_steps, history=history, checkpoint_dir=last_dir
    )
