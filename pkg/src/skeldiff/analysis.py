"""Diffusion-feature correspondence and temporal segmentation.

Features are the intermediate denoiser activations captured during a single
denoising pass of a lightly noised clip. Averaging them over time yields one
descriptor per joint (spatial correspondence across skeletons); averaging
over joints yields one descriptor per frame (temporal correspondence and
frame clustering). All matching uses cosine similarity.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .denoiser import Denoiser
from .diffusion import NoiseSchedule, dift_features
from .motion import MotionTensor
from .preprocess import NormalizationStats
from .skeleton import Skeleton

SPATIAL_STEP = 2
SPATIAL_LAYER = 0
TEMPORAL_STEP = 3
TEMPORAL_LAYER = 1


@dataclass
class CorrespondenceMap:
    """Per target item: best-matching reference index and its similarity."""

    kind: str  # "spatial" (joints) or "temporal" (frames)
    indices: np.ndarray
    similarities: np.ndarray

    def __post_init__(self):
        if np.any(self.similarities < -1.0 - 1e-9) or np.any(
            self.similarities > 1.0 + 1e-9
        ):
            raise ValueError("cosine similarities must lie in [-1, 1]")

    def to_records(self) -> list[dict]:
        return [
            {"target": i, "reference": int(r), "similarity": float(s)}
            for i, (r, s) in enumerate(zip(self.indices, self.similarities))
        ]


@dataclass
class SegmentationResult:
    labels: np.ndarray
    k: int
    pca_dim: int

    def to_records(self) -> list[dict]:
        return [
            {"frame": int(f), "label": int(l)} for f, l in enumerate(self.labels)
        ]


def _cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    an = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
    bn = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
    return np.clip(an @ bn.T, -1.0, 1.0)


def _usable_layer(model: Denoiser, l_corr: int) -> int:
    """Shallow models fall back to their deepest layer."""
    return min(l_corr, model.config.layers - 1)


def _joint_descriptors(feats: np.ndarray, tensor: MotionTensor) -> np.ndarray:
    """Time-mean of (N, J, F) features over valid frames -> (J_valid, F)."""
    valid = feats[tensor.frame_mask][:, tensor.joint_mask]
    if valid.shape[0] == 0:
        raise ValueError("motion has no valid frames")
    return valid.mean(axis=0)


def _frame_descriptors(feats: np.ndarray, tensor: MotionTensor) -> np.ndarray:
    """Joint-mean of (N, J, F) features over valid joints -> (N_valid, F)."""
    valid = feats[tensor.frame_mask][:, tensor.joint_mask]
    if valid.shape[0] == 0:
        raise ValueError("motion has no valid frames")
    return valid.mean(axis=1)


def spatial_correspondence(
    model: Denoiser,
    schedule: NoiseSchedule,
    ref: MotionTensor,
    ref_skeleton: Skeleton,
    tgt: MotionTensor,
    tgt_skeleton: Skeleton,
    t_corr: int = SPATIAL_STEP,
    l_corr: int = SPATIAL_LAYER,
    seed: int = 0,
    ref_stats: Optional[NormalizationStats] = None,
    tgt_stats: Optional[NormalizationStats] = None,
) -> CorrespondenceMap:
    """For each target joint, the most similar reference joint."""
    l_corr = _usable_layer(model, l_corr)
    f_ref = dift_features(
        model, schedule, ref, ref_skeleton, t_corr, l_corr, seed, ref_stats
    )
    f_tgt = dift_features(
        model, schedule, tgt, tgt_skeleton, t_corr, l_corr, seed, tgt_stats
    )
    ref_desc = _joint_descriptors(f_ref, ref)
    tgt_desc = _joint_descriptors(f_tgt, tgt)
    sim = _cosine_matrix(tgt_desc, ref_desc)
    best = sim.argmax(axis=1)
    return CorrespondenceMap(
        kind="spatial",
        indices=best,
        similarities=sim[np.arange(len(best)), best],
    )


def temporal_correspondence(
    model: Denoiser,
    schedule: NoiseSchedule,
    ref: MotionTensor,
    ref_skeleton: Skeleton,
    tgt: MotionTensor,
    tgt_skeleton: Skeleton,
    t_corr: int = TEMPORAL_STEP,
    l_corr: int = TEMPORAL_LAYER,
    seed: int = 0,
    ref_stats: Optional[NormalizationStats] = None,
    tgt_stats: Optional[NormalizationStats] = None,
) -> CorrespondenceMap:
    """For each target frame, the most similar reference frame."""
    l_corr = _usable_layer(model, l_corr)
    f_ref = dift_features(
        model, schedule, ref, ref_skeleton, t_corr, l_corr, seed, ref_stats
    )
    f_tgt = dift_features(
        model, schedule, tgt, tgt_skeleton, t_corr, l_corr, seed, tgt_stats
    )
    ref_desc = _frame_descriptors(f_ref, ref)
    tgt_desc = _frame_descriptors(f_tgt, tgt)
    sim = _cosine_matrix(tgt_desc, ref_desc)
    best = sim.argmax(axis=1)
    return CorrespondenceMap(
        kind="temporal",
        indices=best,
        similarities=sim[np.arange(len(best)), best],
    )


def _pca(x: np.ndarray, dim: int) -> np.ndarray:
    centered = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    return centered @ vt[:dim].T


def _kmeans(
    x: np.ndarray, k: int, rng: np.random.Generator, restarts: int, iters: int = 100
) -> np.ndarray:
    """Plain Lloyd iterations with random restarts; empty clusters are
    reseeded with the farthest point so exactly k labels survive."""
    n = len(x)
    best_labels = None
    best_inertia = np.inf
    for _ in range(restarts):
        centers = x[rng.choice(n, size=k, replace=False)].copy()
        labels = np.zeros(n, dtype=np.int64)
        for _ in range(iters):
            d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            new_labels = d2.argmin(axis=1)
            for c in range(k):
                if not np.any(new_labels == c):
                    new_labels[d2.min(axis=1).argmax()] = c
            if np.array_equal(new_labels, labels):
                labels = new_labels
                break
            labels = new_labels
            for c in range(k):
                centers[c] = x[labels == c].mean(axis=0)
        inertia = float(((x - centers[labels]) ** 2).sum())
        if inertia < best_inertia:
            best_inertia = inertia
            best_labels = labels.copy()
    return best_labels


def temporal_segmentation(
    model: Denoiser,
    schedule: NoiseSchedule,
    tensor: MotionTensor,
    skeleton: Optional[Skeleton] = None,
    k: int = 3,
    pca_dim: int = 32,
    t_seg: int = TEMPORAL_STEP,
    l_seg: int = TEMPORAL_LAYER,
    seed: int = 0,
    restarts: int = 10,
    stats: Optional[NormalizationStats] = None,
) -> SegmentationResult:
    """Cluster the frames of one clip into k groups by their diffusion
    features (joint-mean, PCA-reduced, k-means with fixed seed)."""
    skeleton = skeleton if skeleton is not None else tensor.skeleton
    l_seg = _usable_layer(model, l_seg)
    feats = dift_features(model, schedule, tensor, skeleton, t_seg, l_seg, seed, stats)
    desc = _frame_descriptors(feats, tensor)
    n = len(desc)
    if n < k:
        raise ValueError(f"{n} frames cannot form {k} clusters")
    dim = min(pca_dim, n - 1, desc.shape[1])
    reduced = _pca(desc, dim) if dim >= 1 else desc
    if k == 1:
        labels = np.zeros(n, dtype=np.int64)
    else:
        rng = np.random.default_rng(seed)
        labels = _kmeans(reduced, k, rng, restarts)
    # relabel by first appearance so label ids are stable and dense
    remap: dict[int, int] = {}
    dense = np.empty_like(labels)
    for i, lab in enumerate(labels):
        if int(lab) not in remap:
            remap[int(lab)] = len(remap)
        dense[i] = remap[int(lab)]
    return SegmentationResult(labels=dense, k=k, pca_dim=dim)


def write_records_csv(path, records: list[dict]) -> None:
    """Structured-record export shared by the analysis commands."""
    if not records:
        raise ValueError("no records to write")
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(records[0].keys()))
        writer.writeheader()
        writer.writerows(records)


SEGMENT_COLORS = (
    (230, 60, 60),
    (60, 140, 230),
    (90, 190, 90),
    (230, 190, 60),
    (170, 90, 200),
    (90, 200, 200),
)


def write_label_colormap(path, labels: np.ndarray) -> None:
    """Per-frame RGB sidecar for external visualization tools."""
    rows = [
        {
            "frame": int(i),
            "label": int(l),
            "r": SEGMENT_COLORS[int(l) % len(SEGMENT_COLORS)][0],
            "g": SEGMENT_COLORS[int(l) % len(SEGMENT_COLORS)][1],
            "b": SEGMENT_COLORS[int(l) % len(SEGMENT_COLORS)][2],
        }
        for i, l in enumerate(labels)
    ]
    write_records_csv(path, rows)
