"""Cosine, BCE, InfoNCE and Matryoshka losses."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ebrkit.objectives import (
    LossConfig,
    batch_bce,
    batch_infonce,
    batch_loss,
    bce_loss,
    cosine,
    infonce_loss,
    mrl_loss,
    similarity_matrix,
)

from oracles import central_difference_check, naive_bce, naive_cosine, naive_infonce

finite = st.floats(-1.0, 1.0, allow_nan=False)


class TestCosine:
    def test_self(self):
        v = [0.3, -1.2, 4.0]
        assert cosine(v, v).item() == pytest.approx(1.0, abs=1e-15)

    def test_orthogonal(self):
        assert cosine([1, 0], [0, 1]).item() == 0.0

    def test_diagonal(self):
        assert cosine([1, 1], [1, 0]).item() == pytest.approx(0.7071, abs=1e-4)

    def test_zero_norm(self):
        with pytest.raises(ValueError):
            cosine([0.0, 0.0], [1.0, 0.0])

    @settings(max_examples=50)
    @given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.lists(st.floats(-5, 5), min_size=3, max_size=3),
           st.floats(0.01, 100), st.floats(0.01, 100))
    def test_scale_invariant(self, a, b, alpha, beta):
        if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
            return
        base = cosine(a, b).item()
        scaled = cosine(np.array(a) * alpha, np.array(b) * beta).item()
        assert scaled == pytest.approx(base, abs=1e-12)
        assert base == pytest.approx(naive_cosine(a, b), abs=1e-12)


class TestBCE:
    def test_zero_logit(self):
        assert bce_loss(0.0, 1, 1.0).item() == pytest.approx(math.log(2), abs=1e-15)
        assert bce_loss(0.0, 0, 1.0).item() == pytest.approx(math.log(2), abs=1e-15)

    def test_hand_value(self):
        # y=1: softplus(-z) with z = 0.5/0.1
        assert bce_loss(0.5, 1, 0.1).item() == pytest.approx(0.006715348, abs=1e-9)

    def test_bad_label_and_tau(self):
        with pytest.raises(ValueError):
            bce_loss(0.1, 0.5)
        with pytest.raises(ValueError):
            bce_loss(0.1, 1, 0.0)

    def test_extreme_logits_finite(self):
        for s in (-1.0, 1.0):
            for y in (0, 1):
                v = bce_loss(s, y, 1e-4).item()
                assert math.isfinite(v) and v >= 0

    def test_against_naive(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            s, y, tau = rng.uniform(-1, 1), int(rng.integers(0, 2)), rng.uniform(0.05, 2)
            assert abs(bce_loss(s, y, tau).item() - naive_bce(s, y, tau)) < 1e-10


class TestInfoNCE:
    def test_equal_single(self):
        assert infonce_loss(0.3, [0.3], 0.1).item() == pytest.approx(math.log(2), abs=1e-12)

    @pytest.mark.parametrize("n", [1, 5, 64])
    def test_equal_many(self, n):
        assert infonce_loss(0.2, [0.2] * n, 0.05).item() == pytest.approx(math.log(n + 1), abs=1e-12)

    def test_hand_value(self):
        assert infonce_loss(1.0, [0.0], 1.0).item() == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)

    def test_no_negatives(self):
        with pytest.raises(ValueError):
            infonce_loss(0.1, [])

    def test_against_naive(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            n = int(rng.integers(1, 10))
            s_pos, s_negs, tau = rng.uniform(-1, 1), rng.uniform(-1, 1, n), rng.uniform(0.05, 2)
            assert abs(infonce_loss(s_pos, s_negs, tau).item() - naive_infonce(s_pos, s_negs, tau)) < 1e-10

    def test_small_tau_stable(self):
        v = infonce_loss(-1.0, [1.0, 1.0], 1e-3).item()
        assert math.isfinite(v) and v == pytest.approx(2000 + math.log(2), rel=1e-9)

    def test_vanishes_with_margin(self):
        assert infonce_loss(1.0, [-1.0] * 10, 0.01).item() < 1e-80

    @settings(max_examples=60)
    @given(finite, st.lists(finite, min_size=1, max_size=8), st.floats(0.05, 2.0))
    def test_monotone_and_nonneg(self, s_pos, s_negs, tau):
        sp = torch.tensor(s_pos, dtype=torch.float64, requires_grad=True)
        sn = torch.tensor(s_negs, dtype=torch.float64, requires_grad=True)
        loss = infonce_loss(sp, sn, tau)
        assert loss.item() >= 0
        loss.backward()
        assert sp.grad.item() < 0
        assert (sn.grad > 0).all()


class TestMRL:
    def _vecs(self, d=8, n=4, seed=0):
        rng = np.random.default_rng(seed)
        return rng.standard_normal(d), rng.standard_normal(d), rng.standard_normal((n, d))

    def test_single_dim_is_infonce(self):
        m, p, negs = self._vecs()
        cfg = LossConfig("infonce_mrl", temperature=0.1, mrl_dims=(8,))
        want = infonce_loss(cosine(m, p), cosine(m[None, :], negs), 0.1)
        assert mrl_loss(m, p, negs, cfg).item() == want.item()

    def test_zero_tail(self):
        m, p, negs = self._vecs()
        m[1:], p[1:], negs[:, 1:] = 0, 0, 0
        cfg = LossConfig("infonce_mrl", temperature=0.2, mrl_dims=(1, 4, 8), mrl_weights=(0.5, 0.25, 2.0))
        term = infonce_loss(cosine(m[:1], p[:1]), cosine(m[None, :1], negs[:, :1]), 0.2).item()
        assert mrl_loss(m, p, negs, cfg).item() == pytest.approx(2.75 * term, abs=1e-12)

    def test_two_pass_oracle(self):
        m, p, negs = self._vecs(d=4, n=3, seed=5)
        cfg = LossConfig("infonce_mrl", temperature=0.3, mrl_dims=(2, 4))
        want = 0.0
        for k in (2, 4):
            want += 0.5 * naive_infonce(naive_cosine(m[:k], p[:k]), [naive_cosine(m[:k], n[:k]) for n in negs], 0.3)
        assert mrl_loss(m, p, negs, cfg).item() == pytest.approx(want, abs=1e-10)

    def test_prefix_too_long(self):
        m, p, negs = self._vecs(d=8)
        with pytest.raises(ValueError):
            mrl_loss(m, p, negs, LossConfig("infonce_mrl", mrl_dims=(4, 16)))

    def test_config_validation(self):
        assert LossConfig(mrl_dims=(64, 8, 32, 16)).mrl_dims == (8, 16, 32, 64)
        assert LossConfig().mrl_weights == (0.25,) * 4
        with pytest.raises(ValueError):
            LossConfig(mrl_dims=(8, 8))
        with pytest.raises(ValueError):
            LossConfig(loss_kind="hinge")
        with pytest.raises(ValueError):
            LossConfig(mrl_weights=(1.0,))


class TestDefaults:
    def test_tau(self):
        assert LossConfig("bce").tau == 1.0
        assert LossConfig("infonce").tau == 0.05
        assert LossConfig("infonce", temperature=0.2).tau == 0.2


class TestBatched:
    def _setup(self, seed=0):
        rng = np.random.default_rng(seed)
        mem = torch.from_numpy(rng.standard_normal((3, 6)))
        items = torch.from_numpy(rng.standard_normal((5, 6)))
        pos = torch.tensor([0, 2, 4])
        neg = torch.from_numpy(rng.random((3, 5)) < 0.6)
        neg[torch.arange(3), pos] = False
        neg[:, 1] = True
        return mem, items, pos, neg

    def test_infonce_matches_scalar(self):
        mem, items, pos, neg = self._setup()
        sims = similarity_matrix(mem, items)
        want = np.mean([
            infonce_loss(sims[a, pos[a]], sims[a][neg[a]], 0.1).item() for a in range(3)
        ])
        assert batch_infonce(sims, pos, neg, 0.1).item() == pytest.approx(want, abs=1e-12)

    def test_bce_matches_scalar(self):
        mem, items, pos, neg = self._setup(1)
        sims = similarity_matrix(mem, items)
        terms = []
        for a in range(3):
            terms.append(bce_loss(sims[a, pos[a]], 1).item())
            terms += [bce_loss(s, 0).item() for s in sims[a][neg[a]]]
        assert batch_bce(sims, pos, neg, 1.0).item() == pytest.approx(np.mean(terms), abs=1e-12)

    def test_mrl_matches_scalar(self):
        mem, items, pos, neg = self._setup(2)
        cfg = LossConfig("infonce_mrl", temperature=0.2, mrl_dims=(2, 4, 6))
        want = np.mean([mrl_loss(mem[a], items[pos[a]], items[neg[a]], cfg).item() for a in range(3)])
        assert batch_loss(mem, items, pos, neg, cfg).item() == pytest.approx(want, abs=1e-12)

    @pytest.mark.parametrize("kind", ["bce", "infonce", "infonce_mrl"])
    def test_embedding_gradients(self, kind):
        rng = np.random.default_rng(3)
        mem, items, pos, neg = self._setup(3)
        mem.requires_grad_(True)
        items.requires_grad_(True)
        cfg = LossConfig(kind, temperature=0.3, mrl_dims=(2, 6))
        err, _, _ = central_difference_check(
            [("m", mem), ("i", items)], lambda: batch_loss(mem, items, pos, neg, cfg), rng, n_coords=20)
        assert err < 1e-3
