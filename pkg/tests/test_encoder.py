"""Shared dual encoder: parameters, hidden states, pooling, projection, gradients."""

import numpy as np
import pytest
import torch

from ebrkit.encoder import (
    EncoderConfig,
    backward,
    embed,
    encode,
    init_params,
    last_n_pool,
    mean_pool,
    project,
)
from ebrkit.objectives import LossConfig, batch_loss

from oracles import central_difference_check


def _cfg(**kw):
    base = dict(vocab_size=30, hidden_dim=16, num_layers=2, max_context=32, dtype="float64")
    base.update(kw)
    return EncoderConfig(**base)


ARCHS = ["bag_mlp", "causal_attention"]


class TestInit:
    def test_same_seed_bitwise(self):
        a, b = init_params(_cfg(seed=3)), init_params(_cfg(seed=3))
        for (na, pa), (nb, pb) in zip(a.named_tensors(), b.named_tensors()):
            assert na == nb and torch.equal(pa, pb)

    def test_different_seed(self):
        a, b = init_params(_cfg(seed=1)), init_params(_cfg(seed=2))
        assert not torch.equal(a.p("tok_emb"), b.p("tok_emb"))

    def test_embedding_shape(self):
        m = init_params(EncoderConfig(vocab_size=10, hidden_dim=8))
        assert tuple(m.p("tok_emb").shape) == (10, 8)

    @pytest.mark.parametrize("kw", [
        dict(vocab_size=0), dict(arch="rnn"), dict(arch="causal_attention", hidden_dim=10, num_heads=4),
        dict(pooling="last_n"), dict(projection="pre_pool", projection_dim=64), dict(pooling="max"),
    ])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            _cfg(**kw)


@pytest.mark.parametrize("arch", ARCHS)
class TestEncode:
    def test_single_token(self, arch):
        m = init_params(_cfg(arch=arch))
        assert tuple(encode(m, [3]).shape) == (1, 16)

    def test_empty_sequence(self, arch):
        with pytest.raises(ValueError):
            encode(init_params(_cfg(arch=arch)), [])

    def test_out_of_range_and_overlength(self, arch):
        m = init_params(_cfg(arch=arch))
        with pytest.raises(ValueError):
            encode(m, [30])
        with pytest.raises(ValueError):
            encode(m, [1] * 33)

    def test_batch_matches_single(self, arch):
        m = init_params(_cfg(arch=arch))
        seqs = [[1, 2, 3], [4], [5, 6, 7, 8, 9]]
        batched = m(seqs)
        for row, s in zip(batched, seqs):
            torch.testing.assert_close(row, mean_pool(encode(m, s)), rtol=0, atol=1e-12)

    def test_shared_towers(self, arch):
        # one parameter set serves both towers: same tokens, same vector
        m = init_params(_cfg(arch=arch))
        seq = [2, 7, 1, 8]
        member_side = embed(m, [seq, [3, 3]])[0]
        item_side = embed(m, [[9], seq])[1]
        np.testing.assert_array_equal(member_side, item_side)

    def test_deterministic(self, arch):
        seqs = [[1, 5, 2], [3]]
        a = embed(init_params(_cfg(arch=arch, seed=4)), seqs)
        b = embed(init_params(_cfg(arch=arch, seed=4)), seqs)
        np.testing.assert_array_equal(a, b)


class TestCausality:
    def test_prefix_rows_ignore_future(self):
        m = init_params(_cfg(arch="causal_attention"))
        h1 = encode(m, [1, 2, 3, 4, 5])
        h2 = encode(m, [1, 2, 3, 9, 11])
        torch.testing.assert_close(h1[:3], h2[:3], rtol=0, atol=1e-12)
        assert not torch.allclose(h1[3:], h2[3:])

    def test_bag_mlp_is_per_token(self):
        m = init_params(_cfg(arch="bag_mlp"))
        h1 = encode(m, [1, 2, 3])
        h2 = encode(m, [1, 7, 3])
        torch.testing.assert_close(h1[[0, 2]], h2[[0, 2]], rtol=0, atol=0)


class TestPooling:
    def test_mean_equal_rows(self):
        v = torch.tensor([0.3, -2.0, 5.0], dtype=torch.float64)
        torch.testing.assert_close(mean_pool(v.repeat(4, 1)), v)

    def test_mean_two_rows(self):
        h = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        torch.testing.assert_close(mean_pool(h), torch.tensor([0.5, 0.5], dtype=torch.float64))

    def test_mean_against_summation(self):
        h = np.random.default_rng(0).standard_normal((5, 8))
        want = [sum(h[i, j] for i in range(5)) / 5 for j in range(8)]
        np.testing.assert_allclose(mean_pool(torch.from_numpy(h)).numpy(), want, atol=1e-12, rtol=0)

    def test_empty(self):
        with pytest.raises(ValueError):
            mean_pool(torch.zeros(0, 3))
        with pytest.raises(ValueError):
            last_n_pool(torch.zeros(0, 3), 2)

    def test_last_n(self):
        h = torch.tensor([[1.0, 2.0], [3.0, 4.0], [5.0, 8.0]], dtype=torch.float64)
        torch.testing.assert_close(last_n_pool(h, 1), h[2])
        torch.testing.assert_close(last_n_pool(h, 2), torch.tensor([4.0, 6.0], dtype=torch.float64))
        assert torch.equal(last_n_pool(h, 3), mean_pool(h))
        assert torch.equal(last_n_pool(h, 10), mean_pool(h))

    def test_last_n_in_forward(self):
        m = init_params(_cfg(pooling="last_n", last_n=2))
        seqs = [[1, 2, 3, 4], [5]]
        out = m(seqs)
        torch.testing.assert_close(out[0], last_n_pool(encode(m, seqs[0]), 2), rtol=0, atol=1e-12)
        torch.testing.assert_close(out[1], encode(m, seqs[1])[0], rtol=0, atol=1e-12)


class TestProject:
    def test_identity(self):
        x = torch.randn(4, 6, dtype=torch.float64)
        assert torch.equal(project(x, torch.eye(6, dtype=torch.float64), "pre_pool"), x)

    def test_matrix_vector_oracle(self):
        rng = np.random.default_rng(2)
        x, w = rng.standard_normal(6), rng.standard_normal((6, 4))
        want = [sum(x[i] * w[i, j] for i in range(6)) for j in range(4)]
        got = project(torch.from_numpy(x), torch.from_numpy(w), "post_pool").numpy()
        np.testing.assert_allclose(got, want, atol=1e-12, rtol=0)

    def test_shape_errors(self):
        with pytest.raises(ValueError):
            project(torch.zeros(3), torch.zeros(4, 2), "post_pool")
        with pytest.raises(ValueError):
            project(torch.zeros(3), torch.zeros(3, 5), "post_pool")
        with pytest.raises(ValueError):
            project(torch.zeros(3), torch.zeros(3, 2), "middle")

    def test_output_dim(self):
        for placement in ("pre_pool", "post_pool"):
            m = init_params(_cfg(projection=placement, projection_dim=8))
            assert tuple(m([[1, 2], [3]]).shape) == (2, 8)

    def test_pre_and_post_agree_under_mean_pooling(self):
        # pooling is linear, so the placements coincide for the same weights
        pre = init_params(_cfg(projection="pre_pool", projection_dim=8))
        post = init_params(_cfg(projection="post_pool", projection_dim=8))
        seqs = [[1, 2, 3], [4, 5]]
        torch.testing.assert_close(pre(seqs), post(seqs), rtol=0, atol=1e-12)


class TestBackward:
    def test_nan_rejected(self):
        m = init_params(_cfg())
        with pytest.raises(FloatingPointError):
            backward(m, m([[1]]).sum() * float("nan"))

    def test_zero_loss_zero_gradients(self):
        m = init_params(_cfg())
        grads = backward(m, m([[1, 2]]).sum() * 0.0)
        assert all(torch.count_nonzero(g) == 0 for g in grads.values())

    def test_mean_pool_gradient(self):
        h = torch.randn(5, 3, dtype=torch.float64, requires_grad=True)
        up = torch.randn(3, dtype=torch.float64)
        (mean_pool(h) * up).sum().backward()
        torch.testing.assert_close(h.grad, up.expand(5, 3) / 5, rtol=0, atol=1e-15)

    def test_returns_every_parameter(self):
        m = init_params(_cfg(arch="causal_attention"))
        grads = backward(m, m([[1, 2, 3]]).pow(2).sum())
        assert set(grads) == {n for n, _ in m.named_tensors()}

    def test_gradient_accumulates_across_towers(self):
        m = init_params(_cfg())
        a, b = [1, 2], [3, 4]
        g_both = backward(m, m([a]).sum() + m([b]).sum())["tok_emb"]
        g_a = backward(m, m([a]).sum())["tok_emb"]
        g_b = backward(m, m([b]).sum())["tok_emb"]
        torch.testing.assert_close(g_both, g_a + g_b)

    @pytest.mark.parametrize("arch", ARCHS)
    @pytest.mark.parametrize("kind", ["bce", "infonce", "infonce_mrl"])
    def test_end_to_end_finite_differences(self, arch, kind):
        rng = np.random.default_rng(11)
        m = init_params(_cfg(arch=arch, seed=5))
        members = [rng.integers(0, 30, size=rng.integers(2, 9)).tolist() for _ in range(3)]
        items = [rng.integers(0, 30, size=rng.integers(2, 9)).tolist() for _ in range(5)]
        pos = torch.tensor([0, 1, 2])
        neg = torch.ones(3, 5, dtype=torch.bool)
        neg[torch.arange(3), pos] = False
        cfg = LossConfig(kind, temperature=0.5, mrl_dims=(4, 8, 16))
        err, _, _ = central_difference_check(
            m.named_tensors(), lambda: batch_loss(m(members), m(items), pos, neg, cfg), rng, n_coords=12)
        assert err < 1e-3
