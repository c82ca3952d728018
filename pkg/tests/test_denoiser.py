"""Architecture contracts: enrichment, graph-biased attention, windowing,
permutation equivariance, masking, and activation capture."""

import math

import numpy as np
import pytest
import torch

from skeldiff.denoiser import (
    ActivationTap,
    Denoiser,
    DenoiserConfig,
    HashedNameEmbedder,
    SkeletalAttention,
    SkeletonBatch,
    TableNameEmbedder,
    TemporalAttention,
    graph_attention_logits,
    sinusoidal_embedding,
    write_name_embedding_file,
)

from conftest import biped_skeleton, chain_skeleton, make_skeleton, random_tree

TINY = DenoiserConfig(layers=2, latent=16, heads=2, window=7, d_max=3, steps=10)


def tiny_model(seed=0, config=TINY) -> Denoiser:
    torch.manual_seed(seed)
    return Denoiser(config).double()


def batch_for(model, skeleton, n_frames, seed=0):
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(
        1, n_frames, skeleton.joint_count, 13, generator=gen, dtype=torch.float64
    )
    cond = model.make_condition([skeleton])
    return x, cond


class TestNameEmbedders:
    def test_deterministic_across_instances(self):
        a = HashedNameEmbedder(64).embed("left foot")
        b = HashedNameEmbedder(64).embed("left foot")
        np.testing.assert_array_equal(a, b)

    def test_distinct_names_differ(self):
        emb = HashedNameEmbedder(64)
        assert not np.allclose(emb.embed("left foot"), emb.embed("tail"))

    def test_table_file_round_trip(self, tmp_path, rng):
        table = {"spine": rng.normal(size=8), "left arm": rng.normal(size=8)}
        path = tmp_path / "names.tsv"
        write_name_embedding_file(path, table)
        emb = TableNameEmbedder.from_file(path)
        np.testing.assert_allclose(emb.embed("spine"), table["spine"], atol=1e-8)

    def test_table_strict_rejects_unknown(self, tmp_path, rng):
        path = tmp_path / "names.tsv"
        write_name_embedding_file(path, {"spine": rng.normal(size=4)})
        emb = TableNameEmbedder.from_file(path, strict=True)
        with pytest.raises(KeyError):
            emb.embed("unknown joint")

    def test_table_fallback_hashes_unknown(self, tmp_path, rng):
        path = tmp_path / "names.tsv"
        write_name_embedding_file(path, {"spine": rng.normal(size=16)})
        emb = TableNameEmbedder.from_file(path)
        np.testing.assert_array_equal(
            emb.embed("tail"), HashedNameEmbedder(16).embed("tail")
        )


class TestEnrich:
    def test_prepends_rest_pose_token(self):
        model = tiny_model()
        skel = chain_skeleton(4)
        x, cond = batch_for(model, skel, n_frames=6)
        tokens = model.enrich(x, cond)
        assert tokens.shape == (1, 7, 4, TINY.latent)

    def test_identical_joints_get_identical_tokens(self):
        model = tiny_model()
        skel = make_skeleton(
            [None, 0, 0],
            names=["root", "arm", "arm"],
            offsets=np.array([[0, 0, 0], [1, 0, 0], [1, 0, 0]], dtype=float),
        )
        x = torch.zeros(1, 3, 3, 13, dtype=torch.float64)
        cond = model.make_condition([skel])
        tokens = model.enrich(x, cond)
        torch.testing.assert_close(tokens[:, :, 1], tokens[:, :, 2])

    def test_name_embedding_is_additive(self):
        model = tiny_model()
        skel = chain_skeleton(3)
        x, cond = batch_for(model, skel, n_frames=5)
        with_names = model.enrich(x, cond)
        zeroed = SkeletonBatch(
            rest=cond.rest,
            dist=cond.dist,
            rel=cond.rel,
            names=torch.zeros_like(cond.names),
            joint_mask=cond.joint_mask,
        )
        without = model.enrich(x, zeroed)
        name_term = (
            model.name_proj(cond.names) - model.name_proj(torch.zeros_like(cond.names))
        ).unsqueeze(1)
        torch.testing.assert_close(
            with_names - without, name_term.expand_as(with_names)
        )

    def test_crop_index_shifts_positions(self):
        model = tiny_model()
        skel = chain_skeleton(2)
        x, cond = batch_for(model, skel, n_frames=4)
        t0 = model.enrich(x, cond, crop_index=0)
        t5 = model.enrich(x, cond, crop_index=5)
        # rest-pose token is position 0 in both
        torch.testing.assert_close(t0[:, 0], t5[:, 0])
        assert not torch.allclose(t0[:, 1], t5[:, 1])
        # frame f at crop c sits at absolute position c + f + 1
        pe = sinusoidal_embedding(
            torch.arange(0, 12, dtype=torch.float64), TINY.latent
        )
        delta = t5[:, 1] - t0[:, 1]
        torch.testing.assert_close(
            delta[0, 0], (pe[6] - pe[1]).to(delta.dtype), atol=1e-9, rtol=0
        )

    def test_too_many_joints_rejected(self):
        cfg = DenoiserConfig(layers=1, latent=8, heads=1, window=3, max_joints=3)
        model = Denoiser(cfg)
        skel = chain_skeleton(5)
        x = torch.zeros(1, 2, 5, 13)
        with pytest.raises(ValueError, match="joints"):
            model.enrich(x, model.make_condition([skel]))


class TestGraphBias:
    def test_hand_set_fixture_matches_direct_evaluation(self, rng):
        # 4 joints, 2 heads, head dim 3, d_max 2
        heads, hd, dmax = 2, 3, 2
        q = torch.tensor(rng.normal(size=(1, 1, 4, heads, hd)))
        k = torch.tensor(rng.normal(size=(1, 1, 4, heads, hd)))
        e_dq = torch.tensor(rng.normal(size=(heads, dmax + 1, hd)))
        e_dk = torch.tensor(rng.normal(size=(heads, dmax + 1, hd)))
        e_rq = torch.tensor(rng.normal(size=(heads, 6, hd)))
        e_rk = torch.tensor(rng.normal(size=(heads, 6, hd)))
        dist = torch.tensor(rng.integers(0, dmax + 1, size=(1, 4, 4)))
        rel = torch.tensor(rng.integers(0, 6, size=(1, 4, 4)))
        latent = heads * hd
        logits = graph_attention_logits(
            q, k, e_dq, e_dk, e_rq, e_rk, dist, rel, latent
        )
        for h in range(heads):
            for i in range(4):
                for j in range(4):
                    d_ij = int(dist[0, i, j])
                    r_ij = int(rel[0, i, j])
                    a_d = q[0, 0, i, h] @ e_dq[h, d_ij] + k[0, 0, j, h] @ e_dk[h, d_ij]
                    a_r = q[0, 0, i, h] @ e_rq[h, r_ij] + k[0, 0, j, h] @ e_rk[h, r_ij]
                    expected = (q[0, 0, i, h] @ k[0, 0, j, h] + a_d + a_r) / math.sqrt(
                        latent
                    )
                    assert abs(float(logits[0, h, 0, i, j]) - float(expected)) < 1e-10

    def test_zero_tables_reduce_to_scaled_dot_product(self, rng):
        heads, hd = 2, 4
        q = torch.tensor(rng.normal(size=(1, 2, 5, heads, hd)))
        k = torch.tensor(rng.normal(size=(1, 2, 5, heads, hd)))
        zeros_d = torch.zeros(heads, 4, hd, dtype=torch.float64)
        zeros_r = torch.zeros(heads, 6, hd, dtype=torch.float64)
        dist = torch.zeros(1, 5, 5, dtype=torch.long)
        rel = torch.zeros(1, 5, 5, dtype=torch.long)
        latent = heads * hd
        logits = graph_attention_logits(
            q, k, zeros_d, zeros_d, zeros_r, zeros_r, dist, rel, latent
        )
        expected = torch.einsum("btihd,btjhd->bhtij", q, k) / math.sqrt(latent)
        assert torch.max(torch.abs(logits - expected)) < 1e-7


class TestAttentionContracts:
    def test_rows_sum_to_one_over_valid_joints(self, rng):
        torch.manual_seed(3)
        attn = SkeletalAttention(TINY).double()
        h = torch.tensor(rng.normal(size=(2, 3, 5, TINY.latent)))
        dist = torch.tensor(rng.integers(0, TINY.d_max + 1, size=(2, 5, 5)))
        rel = torch.tensor(rng.integers(0, 6, size=(2, 5, 5)))
        mask = torch.tensor([[True] * 5, [True, True, True, False, False]])
        _, weights = attn(h, dist, rel, mask, need_weights=True)
        sums = weights.sum(dim=-1)
        torch.testing.assert_close(sums, torch.ones_like(sums), atol=1e-6, rtol=0)
        # masked keys receive exactly zero attention
        assert torch.all(weights[1, :, :, :, 3:] == 0)

    def test_single_joint_attends_to_itself(self, rng):
        torch.manual_seed(4)
        attn = SkeletalAttention(TINY).double()
        h = torch.tensor(rng.normal(size=(1, 2, 1, TINY.latent)))
        dist = torch.zeros(1, 1, 1, dtype=torch.long)
        rel = torch.full((1, 1, 1), 4, dtype=torch.long)
        mask = torch.ones(1, 1, dtype=torch.bool)
        _, weights = attn(h, dist, rel, mask, need_weights=True)
        torch.testing.assert_close(weights, torch.ones_like(weights))

    def test_temporal_window_sparsity_is_exact(self, rng):
        cfg = DenoiserConfig(layers=1, latent=8, heads=2, window=31, steps=10)
        torch.manual_seed(5)
        attn = TemporalAttention(cfg).double()
        tokens = 41  # rest token + 40 frames
        h = torch.tensor(rng.normal(size=(1, tokens, 2, cfg.latent)))
        token_mask = torch.ones(1, tokens, dtype=torch.bool)
        _, weights = attn(h, token_mask, need_weights=True)
        half = (cfg.window - 1) // 2
        for i in range(1, tokens):
            for j in range(1, tokens):
                if abs(i - j) > half:
                    assert torch.all(weights[0, :, :, i, j] == 0.0)
        # the rest-pose token stays visible everywhere
        assert torch.all(weights[0, :, :, 1:, 0] > 0)
        sums = weights.sum(dim=-1)
        torch.testing.assert_close(sums, torch.ones_like(sums), atol=1e-6, rtol=0)


class TestForward:
    def test_output_shape_matches_input(self):
        model = tiny_model()
        skel = biped_skeleton()
        x, cond = batch_for(model, skel, n_frames=9)
        out = model(x, 3, cond)
        assert out.shape == x.shape

    def test_step_range_validated(self):
        model = tiny_model()
        skel = chain_skeleton(2)
        x, cond = batch_for(model, skel, 4)
        with pytest.raises(ValueError):
            model(x, 0, cond)
        with pytest.raises(ValueError):
            model(x, TINY.steps + 1, cond)

    def test_permutation_equivariance(self, rng):
        model = tiny_model(seed=7)
        for trial in range(5):
            parents = random_tree(rng, int(rng.integers(3, 8)))
            skel = make_skeleton(parents, names=[f"j{q}" for q in range(len(parents))])
            j = skel.joint_count
            x, cond = batch_for(model, skel, n_frames=6, seed=trial)
            out = model(x, 2, cond)
            perm = rng.permutation(j)
            skel_p = skel.permuted(perm)
            cond_p = model.make_condition([skel_p])
            x_p = torch.zeros_like(x)
            x_p[:, :, perm] = x
            out_p = model(x_p, 2, cond_p)
            expected = torch.zeros_like(out)
            expected[:, :, perm] = out
            assert torch.max(torch.abs(out_p - expected)) < 1e-5

    def test_masked_joints_and_frames_zero(self):
        model = tiny_model()
        skel = chain_skeleton(3)
        cond = model.make_condition([skel], j_max=5)
        x = torch.randn(1, 6, 5, 13, dtype=torch.float64)
        frame_mask = torch.tensor([[True, True, True, True, False, False]])
        out = model(x, 1, cond, frame_mask=frame_mask)
        assert torch.all(out[:, :, 3:] == 0)
        assert torch.all(out[:, 4:] == 0)
        assert torch.any(out[:, :4, :3] != 0)

    def test_determinism(self):
        model = tiny_model(seed=11)
        skel = chain_skeleton(4)
        x, cond = batch_for(model, skel, 7, seed=2)
        a = model(x, 5, cond)
        b = model(x, 5, cond)
        assert torch.equal(a, b)

    def test_timestep_changes_output(self):
        model = tiny_model()
        skel = chain_skeleton(3)
        x, cond = batch_for(model, skel, 5)
        assert not torch.allclose(model(x, 1, cond), model(x, 9, cond))


class TestActivationTap:
    def test_shape_contract(self):
        model = tiny_model()
        skel = chain_skeleton(3)
        x, cond = batch_for(model, skel, 6)
        tap = model.capture_activations(0)
        model(x, 2, cond, tap=tap)
        assert tap.activations.shape == (1, 6, 3, TINY.latent)

    def test_capture_is_read_only(self):
        model = tiny_model()
        skel = chain_skeleton(3)
        x, cond = batch_for(model, skel, 6)
        plain = model(x, 2, cond)
        tap = model.capture_activations(1)
        tapped = model(x, 2, cond, tap=tap)
        assert torch.equal(plain, tapped)

    def test_layers_differ(self):
        model = tiny_model()
        skel = chain_skeleton(3)
        x, cond = batch_for(model, skel, 6)
        tap0 = model.capture_activations(0)
        tap1 = model.capture_activations(1)
        model(x, 2, cond, tap=tap0)
        model(x, 2, cond, tap=tap1)
        assert not torch.allclose(tap0.activations, tap1.activations)

    def test_invalid_layer_rejected(self):
        model = tiny_model()
        with pytest.raises(ValueError):
            model.capture_activations(TINY.layers)


class TestConfigValidation:
    def test_even_window_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            DenoiserConfig(window=30)

    def test_indivisible_heads_rejected(self):
        with pytest.raises(ValueError, match="divisible"):
            DenoiserConfig(latent=10, heads=4)

    def test_defaults_match_reference_setup(self):
        cfg = DenoiserConfig()
        assert cfg.layers == 4
        assert cfg.latent == 128
        assert cfg.window == 31
        assert cfg.d_max == 5
        assert cfg.max_joints == 143
        assert cfg.steps == 100
        assert cfg.feature_dim == 13
