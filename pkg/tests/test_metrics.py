"""Metric identities, brute-force oracle parity, benchmark selection, OOD."""

import itertools

import numpy as np
import pytest

from skeldiff.metrics import (
    MetricConfig,
    MetricError,
    MetricReport,
    coverage,
    coverage_threshold,
    evaluate_skeleton,
    graph_features,
    inter_diversity,
    intra_diversity,
    intra_diversity_diff,
    local_diversity,
    motion_windows,
    ood_score,
    select_benchmark,
    window_sets,
)
from skeldiff.motion import MotionTensor
from skeldiff.skeleton import build_topology

from conftest import chain_skeleton, make_skeleton


def make_motion(rng, frames, joints=2, scale=1.0):
    data = rng.normal(size=(frames, joints, 13)) * scale
    return MotionTensor.from_data(data)


CFG = MetricConfig(window=5, stride=1)


# --- independent brute-force oracles -----------------------------------------


def oracle_windows(motion, cfg):
    data = motion.valid()[:, :, :12]
    out = []
    for s in range(0, data.shape[0] - cfg.window + 1, cfg.stride):
        out.append(data[s : s + cfg.window].ravel())
    return out


def oracle_distance(a, b):
    return float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))


def oracle_coverage(gt, gen, cfg):
    gt_wins = [oracle_windows(m, cfg) for m in gt]
    gen_wins = [w for m in gen for w in oracle_windows(m, cfg)]
    # leave-one-motion-out threshold
    nn = []
    for i, wins in enumerate(gt_wins):
        others = [w for k, other in enumerate(gt_wins) if k != i for w in other]
        for w in wins:
            if others:
                nn.append(min(oracle_distance(w, o) for o in others))
    tau = float(np.percentile(nn, cfg.coverage_percentile)) if nn else 0.0
    hits = 0
    total = 0
    for wins in gt_wins:
        for w in wins:
            d = min(oracle_distance(w, g) for g in gen_wins)
            hits += int(d <= tau)
            total += 1
    return 100.0 * hits / total


def oracle_local_diversity(gen, gt, cfg):
    gt_wins = [w for m in gt for w in oracle_windows(m, cfg)]
    gen_wins = [w for m in gen for w in oracle_windows(m, cfg)]
    return float(
        np.mean([min(oracle_distance(g, w) for w in gt_wins) for g in gen_wins])
    )


def oracle_inter_diversity(gen, cfg):
    sets = [oracle_windows(m, cfg) for m in gen]
    per_pair = []
    for i, k in itertools.combinations(range(len(sets)), 2):
        n = min(len(sets[i]), len(sets[k]))
        dists = [oracle_distance(sets[i][w], sets[k][w]) for w in range(n)]
        per_pair.append(float(np.mean(dists)))
    return float(np.mean(per_pair))


def oracle_intra_diversity(motions, cfg):
    vals = []
    for m in motions:
        wins = oracle_windows(m, cfg)
        pair = [
            oracle_distance(a, b) for a, b in itertools.combinations(wins, 2)
        ]
        vals.append(float(np.mean(pair)))
    return float(np.mean(vals))


class TestIdentities:
    def test_coverage_of_itself_is_100(self, rng):
        motions = [make_motion(rng, 12), make_motion(rng, 15)]
        assert coverage(motions, motions, CFG) == 100.0

    def test_local_diversity_of_itself_is_zero(self, rng):
        motions = [make_motion(rng, 12), make_motion(rng, 15)]
        assert local_diversity(motions, motions, CFG) == 0.0

    def test_intra_diff_of_itself_is_zero(self, rng):
        motions = [make_motion(rng, 12), make_motion(rng, 15)]
        assert intra_diversity_diff(motions, motions, CFG) == 0.0

    def test_identical_generated_motions_have_zero_inter(self, rng):
        m = make_motion(rng, 12)
        copies = [m, MotionTensor.from_data(m.data.copy())]
        assert inter_diversity(copies, CFG) == 0.0


class TestOracleParity:
    def test_coverage_matches_brute_force(self, rng):
        gt = [make_motion(rng, 12), make_motion(rng, 10), make_motion(rng, 14)]
        gen = [make_motion(rng, 11), make_motion(rng, 13)]
        assert coverage(gt, gen, CFG) == pytest.approx(
            oracle_coverage(gt, gen, CFG), abs=1e-9
        )

    def test_constant_pose_generated_vs_varied(self, rng):
        gt = [make_motion(rng, 16), make_motion(rng, 12)]
        const = MotionTensor.from_data(np.tile(rng.normal(size=(1, 2, 13)), (10, 1, 1)))
        assert coverage(gt, [const], CFG) == pytest.approx(
            oracle_coverage(gt, [const], CFG), abs=1e-9
        )

    def test_local_diversity_matches_brute_force(self, rng):
        gt = [make_motion(rng, 12), make_motion(rng, 10)]
        gen = [make_motion(rng, 9), make_motion(rng, 11)]
        assert local_diversity(gen, gt, CFG) == pytest.approx(
            oracle_local_diversity(gen, gt, CFG), abs=1e-9
        )

    def test_inter_diversity_matches_brute_force(self, rng):
        gen = [make_motion(rng, 9), make_motion(rng, 11), make_motion(rng, 8)]
        assert inter_diversity(gen, CFG) == pytest.approx(
            oracle_inter_diversity(gen, CFG), abs=1e-9
        )

    def test_intra_diversity_matches_brute_force(self, rng):
        motions = [make_motion(rng, 12), make_motion(rng, 9)]
        assert intra_diversity(motions, CFG) == pytest.approx(
            oracle_intra_diversity(motions, CFG), abs=1e-9
        )

    def test_intra_diff_matches_brute_force(self, rng):
        gt = [make_motion(rng, 12), make_motion(rng, 9)]
        gen = [make_motion(rng, 10), make_motion(rng, 11)]
        expected = abs(
            oracle_intra_diversity(gen, CFG) - oracle_intra_diversity(gt, CFG)
        )
        assert intra_diversity_diff(gen, gt, CFG) == pytest.approx(expected, abs=1e-9)


class TestProperties:
    def test_permutation_invariance(self, rng):
        gt = [make_motion(rng, 12), make_motion(rng, 10), make_motion(rng, 9)]
        gen = [make_motion(rng, 8), make_motion(rng, 13)]
        before = evaluate_skeleton(gt, gen, CFG)
        after = evaluate_skeleton(
            [gt[2], gt[0], gt[1]], [gen[1], gen[0]], CFG
        )
        for key in before:
            assert before[key] == pytest.approx(after[key], abs=1e-12)

    def test_contacts_excluded_from_distance(self, rng):
        m = make_motion(rng, 12)
        flipped = MotionTensor.from_data(m.data.copy())
        flipped.data[:, :, 12] = 1.0 - flipped.data[:, :, 12]
        assert local_diversity([flipped], [m], CFG) == 0.0

    def test_uniform_rescaling_leaves_metrics_unchanged(self, rng):
        # metrics live in normalized feature space, so a global rescale of
        # the raw clips cancels through the per-skeleton statistics
        from skeldiff.preprocess import compute_stats, normalize

        raw_gt = [make_motion(rng, 14), make_motion(rng, 12)]
        raw_gen = [make_motion(rng, 11), make_motion(rng, 13)]

        def evaluate(scale):
            gt = [MotionTensor.from_data(m.data * scale) for m in raw_gt]
            gen = [MotionTensor.from_data(m.data * scale) for m in raw_gen]
            stats = compute_stats(gt)
            return evaluate_skeleton(
                [normalize(m, stats) for m in gt],
                [normalize(m, stats) for m in gen],
                CFG,
            )

        base = evaluate(1.0)
        scaled = evaluate(7.0)
        for key in base:
            assert base[key] == pytest.approx(scaled[key], abs=1e-6)

    def test_errors_on_empty_or_short(self, rng):
        with pytest.raises(MetricError):
            coverage([], [make_motion(rng, 12)], CFG)
        short = make_motion(rng, 3)  # shorter than the window
        with pytest.raises(MetricError):
            coverage([short], [short], CFG)
        with pytest.raises(MetricError):
            inter_diversity([make_motion(rng, 12)], CFG)

    def test_report_aggregation_and_format(self, rng):
        per = {
            "cat": {
                "coverage": 90.0,
                "local_diversity": 0.2,
                "inter_diversity": 0.3,
                "intra_diversity_diff": 0.1,
            },
            "dog": {
                "coverage": 70.0,
                "local_diversity": 0.4,
                "inter_diversity": 0.5,
                "intra_diversity_diff": 0.3,
            },
        }
        report = MetricReport(per_skeleton=per)
        agg = report.aggregate()
        assert agg["coverage"] == (80.0, 10.0)
        text = report.format_text()
        assert "80.000^{+/-10.000}" in text
        assert "cat" in text and "dog" in text


class TestBenchmarkSelection:
    def test_all_below_range_errors(self, rng):
        with pytest.raises(MetricError):
            select_benchmark({"a": 100, "b": 50}, rng)

    def test_selection_is_subset_of_qualifying(self, rng):
        counts = {f"s{i}": 400 + 40 * i for i in range(30)}
        picked = select_benchmark(counts, rng, n=5)
        for s in picked:
            assert 600 <= counts[s] <= 1200
        assert len(picked) == 5

    def test_stratified_proportions(self, rng):
        counts = {}
        categories = {}
        cats = ["quadruped"] * 20 + ["biped"] * 10 + ["flying"] * 12 + ["insect"] * 10
        for i, cat in enumerate(cats):
            counts[f"s{i}"] = 800
            categories[f"s{i}"] = cat
        tallies = {c: 0 for c in set(cats)}
        rounds = 30
        for k in range(rounds):
            picked = select_benchmark(
                counts, np.random.default_rng(k), n=30, categories=categories
            )
            assert len(picked) == 30
            for s in picked:
                tallies[categories[s]] += 1
        # average per-round category counts near the 43/17/23/17 targets
        assert abs(tallies["quadruped"] / rounds - 0.43 * 30) <= 1.0
        assert abs(tallies["biped"] / rounds - 0.17 * 30) <= 1.0
        assert abs(tallies["flying"] / rounds - 0.23 * 30) <= 1.0
        assert abs(tallies["insect"] / rounds - 0.17 * 30) <= 1.0


def sorted_cdf_wasserstein(a, b):
    """Closed-form 1-D Wasserstein-1 between empirical distributions."""
    a = np.sort(np.asarray(a, dtype=float))
    b = np.sort(np.asarray(b, dtype=float))
    values = np.sort(np.concatenate([a, b]))
    deltas = np.diff(values)
    cdf_a = np.searchsorted(a, values[:-1], side="right") / len(a)
    cdf_b = np.searchsorted(b, values[:-1], side="right") / len(b)
    return float(np.sum(np.abs(cdf_a - cdf_b) * deltas))


class TestOodScore:
    def test_identical_to_training_pool_near_zero(self):
        skel = chain_skeleton(6)
        assert ood_score(skel, [skel, skel, skel]) < 1e-12

    def test_two_skeleton_closed_form(self):
        a = chain_skeleton(4)
        b = make_skeleton([None, 0, 0, 1, 1])
        fa, fb = graph_features(a), graph_features(b)
        expected = np.mean(
            [
                sorted_cdf_wasserstein([fa.joint_count], [fb.joint_count]),
                sorted_cdf_wasserstein(fa.degrees, fb.degrees),
                sorted_cdf_wasserstein(fa.chain_lengths, fb.chain_lengths),
                sorted_cdf_wasserstein(
                    [fa.end_effector_count], [fb.end_effector_count]
                ),
            ]
        )
        assert ood_score(a, [b]) == pytest.approx(expected, abs=1e-12)

    def test_topology_family_ordering(self):
        # training pool: crab-like stars (a hub with many short legs)
        def crab(n_legs, leg_len=2):
            parents = [None]
            for _ in range(n_legs):
                base = len(parents)
                parents.append(0)
                for k in range(1, leg_len):
                    parents.append(base + k - 1)
            return make_skeleton(parents)

        def centipede(body=6, leg_len=2):
            parents = [None] + list(range(body - 1))
            for b in range(body):
                base = len(parents)
                parents.append(b)
                for k in range(1, leg_len):
                    parents.append(base + k - 1)
            return make_skeleton(parents)

        training = [crab(6), crab(8), crab(6, leg_len=3), crab(7)]
        in_dist = crab(7)  # same family, jittered size
        moderate = centipede()  # legs spread along a body, 18 joints
        far = chain_skeleton(18)  # one long limbless chain, 18 joints
        s_in = ood_score(in_dist, training)
        s_mod = ood_score(moderate, training)
        s_far = ood_score(far, training)
        assert s_in < s_mod < s_far

    def test_empty_training_pool(self):
        with pytest.raises(MetricError):
            ood_score(chain_skeleton(3), [])


class TestGraphFeatures:
    def test_chain_decomposition(self):
        skel = chain_skeleton(5)
        f = graph_features(skel)
        assert f.joint_count == 5
        assert f.end_effector_count == 1
        np.testing.assert_array_equal(f.chain_lengths, [4.0])

    def test_star_degrees(self):
        skel = make_skeleton([None, 0, 0, 0])
        f = graph_features(skel)
        assert sorted(f.degrees.tolist()) == [1.0, 1.0, 1.0, 3.0]
        assert f.end_effector_count == 3
        np.testing.assert_array_equal(np.sort(f.chain_lengths), [1.0, 1.0, 1.0])
