"""Arbitrary-topology skeletons and their structural conditions.

A character is modeled as a rooted tree of joints (a connected DAG). From the
tree and its rest-pose offsets we derive everything the rest of the toolkit
conditions on: per-joint rest features, pairwise relation types, capped tree
distances, and cleaned joint names. Joint removal/insertion augmentations
live here too, since they must keep all of those quantities consistent.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Optional, Sequence

import numpy as np

ROOT_PARENT = -1

IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])

FEATURE_DIM = 13


class TopologyError(ValueError):
    """Base class for malformed joint hierarchies."""


class MultipleRootsError(TopologyError):
    pass


class CycleError(TopologyError):
    pass


class DisconnectedError(TopologyError):
    pass


class FootIndexError(TopologyError):
    pass


class RelationKind(IntEnum):
    """Pairwise joint relation; values double as embedding-table rows."""

    CHILD = 0
    PARENT = 1
    SIBLING = 2
    NO_RELATION = 3
    SELF = 4
    END_EFFECTOR = 5


@dataclass(frozen=True)
class Topology:
    """Rooted joint tree stored in topological order (parent[i] < i).

    ``parent`` uses -1 for the single root. ``feet`` is the set of joint
    indices that touch the ground; they are protected from augmentation.
    """

    parent: np.ndarray
    feet: frozenset[int] = field(default_factory=frozenset)

    @property
    def joint_count(self) -> int:
        return len(self.parent)

    @property
    def root(self) -> int:
        return 0

    def children(self, j: int) -> list[int]:
        return [i for i in range(self.joint_count) if self.parent[i] == j]

    def children_lists(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(self.joint_count)]
        for i in range(1, self.joint_count):
            out[int(self.parent[i])].append(i)
        return out

    def is_leaf(self, j: int) -> bool:
        return not np.any(self.parent == j)

    def leaves(self) -> list[int]:
        has_child = np.zeros(self.joint_count, dtype=bool)
        for i in range(1, self.joint_count):
            has_child[int(self.parent[i])] = True
        return [j for j in range(self.joint_count) if not has_child[j]]


@dataclass(frozen=True)
class RestPose:
    """Parent-relative joint offsets of the natural pose.

    After preprocessing the root offset is (0, h, 0) where h is the root's
    rest height above the ground plane; the horizontal components are zero.
    """

    offsets: np.ndarray

    def __post_init__(self):
        offs = np.asarray(self.offsets, dtype=np.float64)
        if offs.ndim != 2 or offs.shape[1] != 3:
            raise ValueError(f"offsets must be (J, 3), got {offs.shape}")
        if not np.all(np.isfinite(offs)):
            raise ValueError("offsets must be finite")
        object.__setattr__(self, "offsets", offs)

    @property
    def root_height(self) -> float:
        return float(self.offsets[0, 1])


def build_topology(
    parent_array: Sequence[Optional[int]], feet: Sequence[int] = ()
) -> tuple[Topology, np.ndarray]:
    """Validate a parent array and re-index it into topological order.

    ``parent_array`` entries are joint indices, with None (or -1) marking the
    root. Returns the topology plus the permutation ``perm`` with
    ``perm[old_index] = new_index``.

    Raises a distinct :class:`TopologyError` subclass for multiple/missing
    roots, cycles, disconnected joints, and out-of-range foot indices.
    """
    parents = [ROOT_PARENT if p is None else int(p) for p in parent_array]
    n = len(parents)
    if n == 0:
        raise TopologyError("parent array is empty")

    roots = [i for i, p in enumerate(parents) if p == ROOT_PARENT]
    if len(roots) != 1:
        raise MultipleRootsError(f"expected exactly one root, found {len(roots)}")
    root = roots[0]

    for i, p in enumerate(parents):
        if p != ROOT_PARENT and not (0 <= p < n):
            raise DisconnectedError(f"joint {i} references missing parent {p}")

    # Walk each joint to the root; revisiting a joint on the same walk is a cycle.
    for start in range(n):
        seen = set()
        j = start
        while j != root:
            if j in seen:
                raise CycleError(f"cycle through joint {j}")
            seen.add(j)
            j = parents[j]
            if len(seen) > n:
                raise CycleError("parent chain does not terminate")

    feet_set = set(int(f) for f in feet)
    for f in feet_set:
        if not (0 <= f < n):
            raise FootIndexError(f"foot index {f} out of range [0, {n})")

    # Re-index only as much as needed: repeatedly emit the smallest joint
    # whose parent is already emitted. Inputs that are already topologically
    # ordered (e.g. BVH depth-first order) come out unchanged.
    emitted = [False] * n
    order: list[int] = []
    candidates = sorted(range(n))
    while candidates:
        pick = None
        for i in candidates:
            p = parents[i]
            if p == ROOT_PARENT or emitted[p]:
                pick = i
                break
        if pick is None:
            raise DisconnectedError("hierarchy is not connected")
        emitted[pick] = True
        order.append(pick)
        candidates.remove(pick)

    perm = np.empty(n, dtype=np.int64)
    for new, old in enumerate(order):
        perm[old] = new
    new_parent = np.full(n, ROOT_PARENT, dtype=np.int64)
    for old, p in enumerate(parents):
        if p != ROOT_PARENT:
            new_parent[perm[old]] = perm[p]
    new_feet = frozenset(int(perm[f]) for f in feet_set)
    return Topology(parent=new_parent, feet=new_feet), perm


def compute_relations(topology: Topology) -> np.ndarray:
    """Pairwise relation matrix; entry [i, j] is j's role relative to i.

    Diagonal entries are SELF, or END_EFFECTOR when the joint is a leaf.
    """
    n = topology.joint_count
    parent = topology.parent
    rel = np.full((n, n), int(RelationKind.NO_RELATION), dtype=np.int64)
    leaves = set(topology.leaves())
    for i in range(n):
        rel[i, i] = int(
            RelationKind.END_EFFECTOR if i in leaves else RelationKind.SELF
        )
    for i in range(n):
        p = int(parent[i])
        if p == ROOT_PARENT:
            continue
        rel[i, p] = int(RelationKind.PARENT)
        rel[p, i] = int(RelationKind.CHILD)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            pi, pj = int(parent[i]), int(parent[j])
            if pi != ROOT_PARENT and pi == pj:
                rel[i, j] = int(RelationKind.SIBLING)
    return rel


def compute_distances(topology: Topology, d_max: int = 5) -> np.ndarray:
    """All-pairs undirected tree distance, capped at d_max."""
    if d_max < 1:
        raise ValueError("d_max must be >= 1")
    n = topology.joint_count
    adj: list[list[int]] = [[] for _ in range(n)]
    for i in range(1, n):
        p = int(topology.parent[i])
        adj[i].append(p)
        adj[p].append(i)
    dist = np.zeros((n, n), dtype=np.int64)
    for src in range(n):
        d = np.full(n, -1, dtype=np.int64)
        d[src] = 0
        queue = [src]
        while queue:
            j = queue.pop(0)
            for nb in adj[j]:
                if d[nb] < 0:
                    d[nb] = d[j] + 1
                    queue.append(nb)
        dist[src] = np.minimum(d, d_max)
    return dist


def rest_pose_features(
    topology: Topology, rest: RestPose, d_feat: int = FEATURE_DIM
) -> np.ndarray:
    """Rest pose in per-joint motion-feature format.

    Forward kinematics with zero rotations gives root-relative global
    positions; each row is position (3), identity rotation in 6D, zero
    velocity (3), and a zero contact flag.
    """
    if d_feat != FEATURE_DIM:
        raise ValueError(f"feature layout is fixed at {FEATURE_DIM} entries")
    n = topology.joint_count
    world = np.zeros((n, 3))
    for i in range(1, n):
        world[i] = world[int(topology.parent[i])] + rest.offsets[i]
    world -= world[0]
    feats = np.zeros((n, FEATURE_DIM))
    feats[:, 0:3] = world
    feats[:, 3:9] = IDENTITY_6D
    return feats


@dataclass(frozen=True)
class Skeleton:
    """A topology with its derived structural conditions.

    ``pose_features`` (J, 13), ``relations`` (J, J), ``distances`` (J, J)
    capped at ``d_max``, and one cleaned name per joint.
    """

    topology: Topology
    rest: RestPose
    names: tuple[str, ...]
    d_max: int
    pose_features: np.ndarray
    relations: np.ndarray
    distances: np.ndarray

    @classmethod
    def build(
        cls,
        topology: Topology,
        rest: RestPose,
        names: Sequence[str],
        d_max: int = 5,
    ) -> "Skeleton":
        if len(names) != topology.joint_count:
            raise ValueError("one name per joint is required")
        if rest.offsets.shape[0] != topology.joint_count:
            raise ValueError("one offset per joint is required")
        return cls(
            topology=topology,
            rest=rest,
            names=tuple(names),
            d_max=int(d_max),
            pose_features=rest_pose_features(topology, rest),
            relations=compute_relations(topology),
            distances=compute_distances(topology, d_max),
        )

    @property
    def joint_count(self) -> int:
        return self.topology.joint_count

    def permuted(self, perm: np.ndarray) -> "Skeleton":
        """Re-index every per-joint quantity by ``perm[old] = new``.

        The result is only a valid Skeleton when the permuted parent array is
        still topologically ordered; intended for equivariance checks.
        """
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        parent = np.full(self.joint_count, ROOT_PARENT, dtype=np.int64)
        for old in range(self.joint_count):
            p = int(self.topology.parent[old])
            if p != ROOT_PARENT:
                parent[perm[old]] = perm[p]
        topo = Topology(
            parent=parent, feet=frozenset(int(perm[f]) for f in self.topology.feet)
        )
        return Skeleton(
            topology=topo,
            rest=RestPose(self.rest.offsets[inv]),
            names=tuple(self.names[i] for i in inv),
            d_max=self.d_max,
            pose_features=self.pose_features[inv],
            relations=self.relations[np.ix_(inv, inv)],
            distances=self.distances[np.ix_(inv, inv)],
        )


@dataclass
class AugmentResult:
    """Outcome of a skeletal augmentation.

    ``index_map[old] = new`` with -1 for removed joints. ``applied`` is False
    when the augmentation was skipped (e.g. nothing removable).
    """

    skeleton: Skeleton
    index_map: np.ndarray
    applied: bool
    new_joint: Optional[int] = None


def _removal_candidates(topology: Topology) -> list[int]:
    """Joints on single-child chains that end in a non-foot leaf.

    Joints with multiple children, feet, and the root are never candidates.
    """
    children = topology.children_lists()
    feet = topology.feet
    candidates: list[int] = []
    for leaf in topology.leaves():
        if leaf in feet:
            continue
        chain = [leaf]
        j = int(topology.parent[leaf])
        while (
            j != ROOT_PARENT
            and j != topology.root
            and j not in feet
            and len(children[j]) == 1
        ):
            chain.append(j)
            j = int(topology.parent[j])
        candidates.extend(chain)
    return sorted(set(candidates))


def _rebuild_without(
    skeleton: Skeleton, removed: set[int]
) -> tuple[Skeleton, np.ndarray]:
    """Drop ``removed`` joints, reattaching survivors with summed offsets."""
    topo = skeleton.topology
    n = topo.joint_count
    keep = [j for j in range(n) if j not in removed]
    index_map = np.full(n, -1, dtype=np.int64)
    for new, old in enumerate(keep):
        index_map[old] = new

    new_parent: list[int] = []
    new_offsets = []
    for old in keep:
        if old == topo.root:
            new_parent.append(ROOT_PARENT)
            new_offsets.append(skeleton.rest.offsets[old].copy())
            continue
        off = skeleton.rest.offsets[old].copy()
        p = int(topo.parent[old])
        while p in removed:
            off = off + skeleton.rest.offsets[p]
            p = int(topo.parent[p])
        new_parent.append(int(index_map[p]))
        new_offsets.append(off)

    feet = [int(index_map[f]) for f in topo.feet]
    new_topo = Topology(
        parent=np.asarray(new_parent, dtype=np.int64), feet=frozenset(feet)
    )
    names = [skeleton.names[old] for old in keep]
    new_skel = Skeleton.build(
        new_topo, RestPose(np.asarray(new_offsets)), names, d_max=skeleton.d_max
    )
    return new_skel, index_map


def augment_remove(
    topology: Topology,
    skeleton: Skeleton,
    rng: np.random.Generator,
    fraction: Optional[float] = None,
) -> AugmentResult:
    """Remove roughly ``fraction`` of the joints (drawn from [0.10, 0.30]).

    Only joints on chains terminating in non-foot end-effectors qualify; feet
    and branching joints are kept. Children of a removed mid-chain joint
    reattach to its nearest surviving ancestor with summed offsets. When
    nothing is removable the input is returned with ``applied=False``.
    """
    if fraction is None:
        fraction = float(rng.uniform(0.10, 0.30))
    if not (0.0 < fraction <= 0.5):
        raise ValueError(f"implausible removal fraction {fraction}")
    candidates = _removal_candidates(topology)
    if not candidates:
        identity = np.arange(topology.joint_count, dtype=np.int64)
        return AugmentResult(skeleton=skeleton, index_map=identity, applied=False)
    count = int(round(fraction * topology.joint_count))
    count = max(1, min(count, len(candidates)))
    chosen = rng.choice(np.asarray(candidates), size=count, replace=False)
    new_skel, index_map = _rebuild_without(skeleton, set(int(c) for c in chosen))
    return AugmentResult(skeleton=new_skel, index_map=index_map, applied=True)


def augment_add(
    topology: Topology, skeleton: Skeleton, rng: np.random.Generator
) -> AugmentResult:
    """Insert one joint at the midpoint of a uniformly chosen edge.

    The new joint and its former child each carry half the original offset;
    the new joint is named after the child with a "mid" qualifier.
    """
    n = topology.joint_count
    if n < 2:
        raise TopologyError("need at least one edge to subdivide")
    child = int(rng.integers(1, n))
    parent = int(topology.parent[child])

    # Insert the midpoint joint directly before the child so the stored
    # order stays topological without a re-sort. Old index j maps to j for
    # j < child and to j + 1 otherwise; the midpoint takes index `child`.
    def shifted(j: int) -> int:
        return j if j < child else j + 1

    new_parent: list[int] = []
    new_offsets = []
    new_names: list[str] = []
    for old in range(n):
        if old == child:
            new_parent.append(parent)  # parent < child, unaffected by shift
            new_offsets.append(skeleton.rest.offsets[child] / 2.0)
            new_names.append(f"{skeleton.names[child]} mid")
            new_parent.append(child)  # the midpoint is this joint's parent
            new_offsets.append(skeleton.rest.offsets[child] / 2.0)
            new_names.append(skeleton.names[child])
        else:
            p = int(topology.parent[old])
            if p == ROOT_PARENT:
                new_parent.append(ROOT_PARENT)
            else:
                new_parent.append(shifted(p))
            new_offsets.append(skeleton.rest.offsets[old].copy())
            new_names.append(skeleton.names[old])

    index_map = np.array([shifted(j) for j in range(n)], dtype=np.int64)
    feet = frozenset(int(index_map[f]) for f in topology.feet)
    new_topo = Topology(parent=np.asarray(new_parent, dtype=np.int64), feet=feet)
    new_skel = Skeleton.build(
        new_topo, RestPose(np.asarray(new_offsets)), new_names, d_max=skeleton.d_max
    )
    return AugmentResult(
        skeleton=new_skel, index_map=index_map, applied=True, new_joint=child
    )


SKELETON_FILE_VERSION = 1


def save_skeleton_text(skeleton: Skeleton) -> str:
    """Serialize to the line-based skeleton file format.

    Format (one joint per line, offsets in scene units)::

        skeldiff-skeleton 1
        joints <J> d_max <d>
        <index> <parent> <foot 0|1> <ox> <oy> <oz> <name words...>
    """
    lines = [f"skeldiff-skeleton {SKELETON_FILE_VERSION}"]
    lines.append(f"joints {skeleton.joint_count} d_max {skeleton.d_max}")
    for j in range(skeleton.joint_count):
        p = int(skeleton.topology.parent[j])
        foot = 1 if j in skeleton.topology.feet else 0
        ox, oy, oz = skeleton.rest.offsets[j]
        lines.append(
            f"{j} {p} {foot} {ox:.9g} {oy:.9g} {oz:.9g} {skeleton.names[j]}"
        )
    return "\n".join(lines) + "\n"


def load_skeleton_text(text: str) -> Skeleton:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    header = lines[0].split()
    if header[0] != "skeldiff-skeleton":
        raise ValueError("not a skeleton file")
    meta = lines[1].split()
    count, d_max = int(meta[1]), int(meta[3])
    parents: list[Optional[int]] = []
    feet: list[int] = []
    offsets = np.zeros((count, 3))
    names: list[str] = []
    for ln in lines[2 : 2 + count]:
        parts = ln.split()
        idx, parent, foot = int(parts[0]), int(parts[1]), int(parts[2])
        parents.append(None if parent == ROOT_PARENT else parent)
        if foot:
            feet.append(idx)
        offsets[idx] = [float(parts[3]), float(parts[4]), float(parts[5])]
        names.append(" ".join(parts[6:]))
    topo, perm = build_topology(parents, feet)
    if not np.array_equal(perm, np.arange(count)):
        raise ValueError("skeleton file joints must be stored in topological order")
    return Skeleton.build(topo, RestPose(offsets), names, d_max=d_max)
