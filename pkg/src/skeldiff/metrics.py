"""Coverage / diversity evaluation protocol and skeleton OOD scoring.

All four metrics compare sets of motions of one skeleton through sliding
temporal windows in that skeleton's normalized feature space. The window
distance is the mean per-entry squared difference over valid features
(contact flags excluded). Coverage and the intra-diversity difference
measure fidelity; local and inter diversity measure variety.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import wasserstein_distance

from .motion import MotionTensor
from .skeleton import Skeleton, Topology


class MetricError(ValueError):
    pass


@dataclass
class MetricConfig:
    window: int = 20
    stride: int = 1
    coverage_percentile: float = 95.0
    include_contacts: bool = False

    def __post_init__(self):
        if self.window < 2:
            raise ValueError("window must be >= 2")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")


def motion_windows(motion: MotionTensor, cfg: MetricConfig) -> np.ndarray:
    """Sliding windows of one motion, flattened to (n_windows, features)."""
    data = motion.valid()
    if not cfg.include_contacts:
        data = data[:, :, :12]
    n = data.shape[0]
    w = cfg.window
    if n < w:
        return np.zeros((0, w * data.shape[1] * data.shape[2]))
    starts = range(0, n - w + 1, cfg.stride)
    return np.stack([data[s : s + w].ravel() for s in starts])


def window_sets(motions: Sequence[MotionTensor], cfg: MetricConfig) -> list[np.ndarray]:
    sets = [motion_windows(m, cfg) for m in motions]
    if all(len(s) == 0 for s in sets):
        raise MetricError("no motion is long enough for the window size")
    return sets


def window_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise mean squared per-entry differences, shape (len(a), len(b))."""
    diff = a[:, None, :] - b[None, :, :]
    return (diff**2).mean(axis=2)


def coverage_threshold(gt_sets: list[np.ndarray], cfg: MetricConfig) -> float:
    """Reproduction threshold: a percentile of ground-truth-to-ground-truth
    nearest-neighbor window distances, leave-one-out.

    With several motions the neighbor pool for a window excludes its own
    motion; with a single motion it excludes only the window itself.
    """
    nn: list[float] = []
    nonempty = [s for s in gt_sets if len(s)]
    for i, windows in enumerate(gt_sets):
        if len(windows) == 0:
            continue
        if len(nonempty) > 1:
            others = np.concatenate(
                [s for k, s in enumerate(gt_sets) if k != i and len(s)]
            )
            nn.extend(window_distances(windows, others).min(axis=1).tolist())
        elif len(windows) > 1:
            d = window_distances(windows, windows)
            np.fill_diagonal(d, np.inf)
            nn.extend(d.min(axis=1).tolist())
    if not nn:
        return 0.0
    return float(np.percentile(nn, cfg.coverage_percentile))


def coverage(
    gt: Sequence[MotionTensor],
    generated: Sequence[MotionTensor],
    cfg: Optional[MetricConfig] = None,
) -> float:
    """Percentage of ground-truth windows reproduced by the generated set."""
    cfg = cfg or MetricConfig()
    if not gt or not generated:
        raise MetricError("both motion sets must be nonempty")
    gt_sets = window_sets(gt, cfg)
    gen = np.concatenate([w for w in window_sets(generated, cfg) if len(w)])
    tau = coverage_threshold(gt_sets, cfg)
    gt_all = np.concatenate([w for w in gt_sets if len(w)])
    nearest = window_distances(gt_all, gen).min(axis=1)
    return float((nearest <= tau).mean() * 100.0)


def local_diversity(
    generated: Sequence[MotionTensor],
    gt: Sequence[MotionTensor],
    cfg: Optional[MetricConfig] = None,
) -> float:
    """Mean distance from generated windows to their nearest GT window."""
    cfg = cfg or MetricConfig()
    if not gt or not generated:
        raise MetricError("both motion sets must be nonempty")
    gen = np.concatenate([w for w in window_sets(generated, cfg) if len(w)])
    gt_all = np.concatenate([w for w in window_sets(gt, cfg) if len(w)])
    return float(window_distances(gen, gt_all).min(axis=1).mean())


def inter_diversity(
    generated: Sequence[MotionTensor], cfg: Optional[MetricConfig] = None
) -> float:
    """Mean distance between index-aligned windows of distinct motions.

    Windows are paired positionally (identical motions therefore score 0);
    pairs of motions are averaged over their common window count.
    """
    cfg = cfg or MetricConfig()
    if len(generated) < 2:
        raise MetricError("inter diversity needs at least two motions")
    sets = window_sets(generated, cfg)
    values = []
    for i in range(len(sets)):
        for k in range(i + 1, len(sets)):
            n = min(len(sets[i]), len(sets[k]))
            if n == 0:
                continue
            diff = sets[i][:n] - sets[k][:n]
            values.append(float((diff**2).mean()))
    if not values:
        raise MetricError("no valid motion pair for inter diversity")
    return float(np.mean(values))


def intra_diversity(
    motions: Sequence[MotionTensor], cfg: Optional[MetricConfig] = None
) -> float:
    """Mean pairwise window distance within each motion, averaged over motions."""
    cfg = cfg or MetricConfig()
    sets = window_sets(motions, cfg)
    values = []
    for windows in sets:
        if len(windows) < 2:
            raise MetricError("intra diversity needs >= 2 windows per motion")
        d = window_distances(windows, windows)
        iu = np.triu_indices(len(windows), k=1)
        values.append(float(d[iu].mean()))
    return float(np.mean(values))


def intra_diversity_diff(
    generated: Sequence[MotionTensor],
    gt: Sequence[MotionTensor],
    cfg: Optional[MetricConfig] = None,
) -> float:
    cfg = cfg or MetricConfig()
    return abs(intra_diversity(generated, cfg) - intra_diversity(gt, cfg))


def evaluate_skeleton(
    gt: Sequence[MotionTensor],
    generated: Sequence[MotionTensor],
    cfg: Optional[MetricConfig] = None,
) -> dict[str, float]:
    cfg = cfg or MetricConfig()
    return {
        "coverage": coverage(gt, generated, cfg),
        "local_diversity": local_diversity(generated, gt, cfg),
        "inter_diversity": inter_diversity(generated, cfg),
        "intra_diversity_diff": intra_diversity_diff(generated, gt, cfg),
    }


@dataclass
class MetricReport:
    per_skeleton: dict[str, dict[str, float]]
    sample_counts: dict[str, int] = field(default_factory=dict)
    config: Optional[MetricConfig] = None

    METRICS = ("coverage", "local_diversity", "inter_diversity", "intra_diversity_diff")

    def aggregate(self) -> dict[str, tuple[float, float]]:
        """Mean and standard deviation of each metric across skeletons."""
        out = {}
        for m in self.METRICS:
            vals = np.array([v[m] for v in self.per_skeleton.values()])
            out[m] = (float(vals.mean()), float(vals.std()))
        return out

    def format_text(self) -> str:
        lines = ["skeleton  coverage  local_div  inter_div  intra_div_diff"]
        for sid in sorted(self.per_skeleton):
            v = self.per_skeleton[sid]
            lines.append(
                f"{sid}  {v['coverage']:.2f}  {v['local_diversity']:.4f}  "
                f"{v['inter_diversity']:.4f}  {v['intra_diversity_diff']:.4f}"
            )
        agg = self.aggregate()
        parts = [f"{m}: {mean:.3f}^{{+/-{std:.3f}}}" for m, (mean, std) in agg.items()]
        lines.append("aggregate  " + "  ".join(parts))
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "per_skeleton": self.per_skeleton,
            "sample_counts": self.sample_counts,
            "aggregate": {
                m: {"mean": mean, "std": std}
                for m, (mean, std) in self.aggregate().items()
            },
        }


DEFAULT_CATEGORY_PROPORTIONS = {
    "quadruped": 0.43,
    "biped": 0.17,
    "flying": 0.23,
    "insect": 0.17,
}


def select_benchmark(
    frame_counts: dict[str, int],
    rng: np.random.Generator,
    n: int = 30,
    frame_range: tuple[int, int] = (600, 1200),
    categories: Optional[dict[str, str]] = None,
    proportions: Optional[dict[str, float]] = None,
) -> list[str]:
    """Random benchmark subset of skeletons with cumulative frame counts in
    ``frame_range``, stratified to the category proportions when labels
    exist."""
    lo, hi = frame_range
    qualifying = sorted(s for s, c in frame_counts.items() if lo <= c <= hi)
    if not qualifying:
        raise MetricError(
            f"no skeleton has a cumulative frame count in [{lo}, {hi}]"
        )
    if n >= len(qualifying):
        return qualifying
    if not categories:
        picked = rng.choice(len(qualifying), size=n, replace=False)
        return sorted(qualifying[i] for i in picked)

    props = proportions or DEFAULT_CATEGORY_PROPORTIONS
    by_cat: dict[str, list[str]] = {}
    for s in qualifying:
        by_cat.setdefault(categories.get(s, "other"), []).append(s)
    selected: list[str] = []
    for cat, members in sorted(by_cat.items()):
        target = int(round(props.get(cat, 0.0) * n))
        take = min(target, len(members))
        if take:
            picked = rng.choice(len(members), size=take, replace=False)
            selected.extend(members[i] for i in picked)
    remaining = [s for s in qualifying if s not in set(selected)]
    while len(selected) < n and remaining:
        i = int(rng.integers(0, len(remaining)))
        selected.append(remaining.pop(i))
    return sorted(selected[:n])


# --- skeleton out-of-distribution scoring -----------------------------------


@dataclass
class GraphFeatureVector:
    """Distributional summary of a topology used for OOD scoring."""

    joint_count: int
    degrees: np.ndarray
    chain_lengths: np.ndarray
    end_effector_count: int


def graph_features(skeleton: Skeleton | Topology) -> GraphFeatureVector:
    topo = skeleton.topology if isinstance(skeleton, Skeleton) else skeleton
    n = topo.joint_count
    children = topo.children_lists()
    degrees = np.array(
        [len(children[j]) + (0 if j == topo.root else 1) for j in range(n)],
        dtype=np.float64,
    )
    is_key = [j == topo.root or len(children[j]) != 1 for j in range(n)]
    chain_lengths = []
    for j in range(n):
        if j == topo.root or not is_key[j]:
            continue
        length = 1
        p = int(topo.parent[j])
        while not is_key[p]:
            length += 1
            p = int(topo.parent[p])
        chain_lengths.append(length)
    leaves = topo.leaves()
    return GraphFeatureVector(
        joint_count=n,
        degrees=degrees,
        chain_lengths=np.array(chain_lengths or [0], dtype=np.float64),
        end_effector_count=len(leaves),
    )


def ood_score(
    skeleton: Skeleton | Topology, training: Sequence[Skeleton | Topology]
) -> float:
    """Mean 1-D Wasserstein distance between the skeleton's graph features
    and the pooled training distributions."""
    if not training:
        raise MetricError("training set is empty")
    target = graph_features(skeleton)
    pool = [graph_features(s) for s in training]
    components = [
        (
            np.array([target.joint_count], dtype=np.float64),
            np.array([p.joint_count for p in pool], dtype=np.float64),
        ),
        (target.degrees, np.concatenate([p.degrees for p in pool])),
        (
            target.chain_lengths,
            np.concatenate([p.chain_lengths for p in pool]),
        ),
        (
            np.array([target.end_effector_count], dtype=np.float64),
            np.array([p.end_effector_count for p in pool], dtype=np.float64),
        ),
    ]
    distances = [wasserstein_distance(a, b) for a, b in components]
    return float(np.mean(distances))
