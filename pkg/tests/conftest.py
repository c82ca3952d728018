"""Shared fixtures: random trees, small skeletons, synthetic clips."""

from __future__ import annotations

import numpy as np
import pytest

from skeldiff.motion import JointMotion
from skeldiff.skeleton import RestPose, Skeleton, Topology, build_topology


def random_tree(rng: np.random.Generator, n: int) -> list:
    """Random parent array in topological order (root first)."""
    parents = [None]
    for i in range(1, n):
        parents.append(int(rng.integers(0, i)))
    return parents


def make_skeleton(
    parents, feet=(), names=None, offsets=None, d_max: int = 5
) -> Skeleton:
    topo, perm = build_topology(parents, feet)
    n = topo.joint_count
    if offsets is None:
        seed = abs(hash(tuple(str(p) for p in parents))) % 2**32
        offsets = np.random.default_rng(seed).normal(size=(n, 3)) * 0.5
        offsets[0] = 0.0
    offsets = np.asarray(offsets, dtype=np.float64)[np.argsort(perm)]
    if names is None:
        names = [f"joint {i}" for i in range(n)]
    else:
        names = [names[i] for i in np.argsort(perm)]
    return Skeleton.build(topo, RestPose(offsets), names, d_max=d_max)


def chain_skeleton(n: int, feet=(), bone=(0.0, 1.0, 0.0)) -> Skeleton:
    parents = [None] + list(range(n - 1))
    offsets = np.tile(np.asarray(bone, dtype=np.float64), (n, 1))
    offsets[0] = 0.0
    names = [f"link {i}" for i in range(n)]
    return make_skeleton(parents, feet=feet, names=names, offsets=offsets)


def biped_skeleton() -> Skeleton:
    """Tiny grounded biped: hips, spine, head, two legs ending in feet."""
    parents = [None, 0, 1, 0, 3, 0, 5]
    names = ["hips", "spine", "head", "left leg", "left foot", "right leg", "right foot"]
    offsets = np.array(
        [
            [0.0, 0.0, 0.0],
            [0.0, 0.4, 0.0],
            [0.0, 0.4, 0.1],
            [0.15, -0.45, 0.0],
            [0.0, -0.45, 0.1],
            [-0.15, -0.45, 0.0],
            [0.0, -0.45, 0.1],
        ]
    )
    return make_skeleton(parents, feet=(4, 6), names=names, offsets=offsets)


def tailed_biped_skeleton() -> Skeleton:
    """A different topology sharing limb names with the plain biped: no
    spine or head, but a three-joint tail chain."""
    parents = [None, 0, 1, 0, 3, 0, 5, 6]
    names = [
        "hips",
        "left leg",
        "left foot",
        "right leg",
        "right foot",
        "tail",
        "tail mid",
        "tail tip",
    ]
    offsets = np.array(
        [
            [0.0, 0.0, 0.0],
            [0.18, -0.42, 0.0],
            [0.0, -0.48, 0.1],
            [-0.18, -0.42, 0.0],
            [0.0, -0.48, 0.1],
            [0.0, 0.1, -0.3],
            [0.0, 0.05, -0.3],
            [0.0, 0.0, -0.25],
        ]
    )
    return make_skeleton(parents, feet=(2, 4), names=names, offsets=offsets)


DEFAULT_SWING_AXIS = (0.8, 0.45, 0.4)


def swing_motion(
    skeleton: Skeleton,
    frames: int,
    amplitude: float = 0.6,
    frequency: float = 1.0,
    phase: float = 0.0,
    axis=DEFAULT_SWING_AXIS,
    fps: float = 30.0,
    root_velocity=(0.0, 0.0, 0.0),
    root_height: float = 1.0,
    angle_offset: float = 0.0,
) -> JointMotion:
    """Synthetic clip: every non-root joint swings about a fixed axis.

    ``angle_offset`` biases the swing, which turns a near-zero amplitude
    into a held pose; the default axis has components on all three axes so
    every rotation feature channel sees variance.
    """
    j = skeleton.joint_count
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    t = np.arange(frames) / fps
    angles = angle_offset + amplitude * np.sin(2 * np.pi * frequency * t + phase)
    rotations = np.tile(np.eye(3), (frames, j, 1, 1))
    for f in range(frames):
        rot = _axis_angle(axis, angles[f])
        for joint in range(1, j):
            rotations[f, joint] = rot
    root = np.zeros((frames, 3))
    root[:, 1] = root_height
    vel = np.asarray(root_velocity, dtype=np.float64)
    root += t[:, None] * vel
    return JointMotion(root_positions=root, rotations=rotations, fps=fps)


def _axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    x, y, z = axis
    c, s = np.cos(angle), np.sin(angle)
    cc = 1 - c
    return np.array(
        [
            [c + x * x * cc, x * y * cc - z * s, x * z * cc + y * s],
            [y * x * cc + z * s, c + y * y * cc, y * z * cc - x * s],
            [z * x * cc - y * s, z * y * cc + x * s, c + z * z * cc],
        ]
    )


def toy_dataset(frames: int = 50, fps: float = 25.0):
    """Two synthetic skeletons with two distinct clips each."""
    from skeldiff.features import detect_contacts_for_clip, features_from_clip
    from skeldiff.preprocess import compute_stats
    from skeldiff.training import Dataset, DatasetEntry

    entries = []
    # two clips per skeleton perform the same action with a small phase
    # and amplitude jitter, so a tiny model can actually memorize them
    specs = [
        ("walker", biped_skeleton(), [(0.5, 1.0, 0.0), (0.55, 1.0, 0.4)]),
        ("strider", tailed_biped_skeleton(), [(0.45, 1.0, 0.1), (0.5, 1.0, 0.5)]),
    ]
    for skel_id, skel, params in specs:
        clips = []
        for amplitude, frequency, phase in params:
            motion = swing_motion(
                skel,
                frames,
                amplitude=amplitude,
                frequency=frequency,
                phase=phase,
                fps=fps,
                root_velocity=(0.0, 0.0, 0.2),
            )
            contacts = detect_contacts_for_clip(skel, motion)
            clips.append(features_from_clip(skel, motion, contacts))
        entries.append(
            DatasetEntry(
                skeleton_id=skel_id,
                skeleton=skel,
                clips=clips,
                stats=compute_stats(clips),
            )
        )
    return Dataset(entries)


def three_action_clip(skeleton, segment: int = 20, fps: float = 25.0):
    """Concatenation of three scripted actions with crisp boundaries.

    The actions differ by large static pose offsets about the training
    swing axis, so frame descriptors separate cleanly. Returns the feature
    tensor and the true boundary frame indices.
    """
    from skeldiff.features import detect_contacts_for_clip, features_from_clip
    from skeldiff.motion import JointMotion

    common = dict(fps=fps, root_velocity=(0.0, 0.0, 0.2))
    parts = [
        swing_motion(skeleton, segment, amplitude=0.1, frequency=1.0, **common),
        swing_motion(
            skeleton, segment, amplitude=0.1, frequency=1.0, angle_offset=1.0, **common
        ),
        swing_motion(
            skeleton, segment, amplitude=0.1, frequency=1.0, angle_offset=-1.0, **common
        ),
    ]
    rotations = np.concatenate([p.rotations for p in parts], axis=0)
    root = np.concatenate([p.root_positions for p in parts], axis=0)
    motion = JointMotion(root_positions=root, rotations=rotations, fps=fps)
    tensor = features_from_clip(
        skeleton, motion, detect_contacts_for_clip(skeleton, motion)
    )
    return tensor, [segment, 2 * segment]


@pytest.fixture(scope="session")
def overfit_bundle():
    """A small denoiser memorizing the toy dataset; shared by the analysis
    tests and the acceptance suite (training takes a few minutes)."""
    import torch

    from skeldiff.denoiser import Denoiser, DenoiserConfig
    from skeldiff.diffusion import NoiseSchedule
    from skeldiff.training import TrainConfig, train

    torch.set_num_threads(1)
    config = DenoiserConfig(layers=2, latent=64, heads=4, window=31, d_max=5, steps=100)
    torch.manual_seed(0)
    model = Denoiser(config)
    dataset = toy_dataset(frames=50)
    train_config = TrainConfig(
        batch_size=16,
        crop_length=40,
        learning_rate=1e-3,
        total_steps=1600,
        seed=2,
        log_every=200,
        lambda_rot=1.0,
    )
    result = train(dataset, model, train_config, augment=False)
    model.eval()
    return {
        "model": model,
        "dataset": dataset,
        "schedule": NoiseSchedule.cosine(config.steps),
        "train_config": train_config,
        "history": result.history,
    }


def semantic_pair_dataset(frames: int = 30, fps: float = 25.0):
    """Two bipeds of different topology sharing limb names; used for the
    cross-skeleton joint-correspondence check."""
    from skeldiff.features import detect_contacts_for_clip, features_from_clip
    from skeldiff.preprocess import compute_stats
    from skeldiff.training import Dataset, DatasetEntry

    entries = []
    specs = [
        ("walker", biped_skeleton(), [(0.5, 1.0, 0.0), (0.55, 1.0, 0.4)]),
        ("strider", tailed_biped_skeleton(), [(0.4, 1.0, 0.0), (0.45, 1.0, 0.3)]),
    ]
    for skel_id, skel, params in specs:
        clips = []
        for amplitude, frequency, phase in params:
            motion = swing_motion(
                skel,
                frames,
                amplitude=amplitude,
                frequency=frequency,
                phase=phase,
                fps=fps,
                root_velocity=(0.0, 0.0, 0.2),
            )
            contacts = detect_contacts_for_clip(skel, motion)
            clips.append(features_from_clip(skel, motion, contacts))
        entries.append(
            DatasetEntry(
                skeleton_id=skel_id, skeleton=skel, clips=clips,
                stats=compute_stats(clips),
            )
        )
    return Dataset(entries)


@pytest.fixture(scope="session")
def semantic_bundle():
    """A quick overfit on the shared-name biped pair."""
    import torch

    from skeldiff.denoiser import Denoiser, DenoiserConfig
    from skeldiff.diffusion import NoiseSchedule
    from skeldiff.training import TrainConfig, train

    torch.set_num_threads(1)
    config = DenoiserConfig(layers=2, latent=32, heads=4, window=31, d_max=5, steps=100)
    torch.manual_seed(1)
    model = Denoiser(config)
    dataset = semantic_pair_dataset(frames=30)
    train_config = TrainConfig(
        batch_size=8,
        crop_length=24,
        learning_rate=1e-3,
        total_steps=500,
        seed=3,
        log_every=250,
        lambda_rot=1.0,
    )
    train(dataset, model, train_config, augment=False)
    model.eval()
    return {
        "model": model,
        "dataset": dataset,
        "schedule": NoiseSchedule.cosine(config.steps),
    }


@pytest.fixture
def rng():
    return np.random.default_rng(42)
