import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import fd_gradients, max_rel_error, reference_ncl, reference_terms, tiny_instance, top_by_value, weighted
from csr_embed.config import TrainConfig
from csr_embed.core import SparseVector
from csr_embed.model import SaeModel, encode, init_model
from csr_embed.objective import (
    DivergenceError,
    aux_loss,
    batch_loss_and_grads,
    ncl_dense,
    ncl_loss,
    recon_loss,
)


def sv(dim, entries):
    return SparseVector.from_dict(dim, entries)


class TestRecon:
    def test_perfect(self):
        assert recon_loss([1.0, 2.0], [1.0, 2.0]) == 0.0

    def test_unit(self):
        assert recon_loss([1.0, 0.0], [0.0, 0.0]) == 1.0

    def test_vs_scalar_loop(self, rng):
        v, r = rng.standard_normal(50), rng.standard_normal(50)
        assert recon_loss(v, r) == pytest.approx(math.fsum((a - b) ** 2 for a, b in zip(v, r)), abs=1e-6)


class TestAux:
    def test_no_dead(self, rng):
        m = init_model(4, 8)
        v = rng.standard_normal(4)
        assert aux_loss(v, np.zeros(4), m, [], 4) == 0.0

    def test_exact_residual_fit(self):
        # latent 1 is dead and reproduces the residual exactly
        W = np.array([[1.0, 0.0], [0.0, 1.0]], np.float32)
        m = SaeModel(W, np.zeros(2, np.float32), np.zeros(2, np.float32))
        v = np.array([0.0, 2.0])
        recon = np.array([0.0, 0.0])
        assert aux_loss(v, recon, m, [1], 1) == 0.0

    def test_vs_brute_force(self, rng):
        h, d = 20, 6
        m = SaeModel(
            rng.standard_normal((h, d)).astype(np.float32),
            rng.standard_normal(h).astype(np.float32),
            rng.standard_normal(d).astype(np.float32),
        )
        for _ in range(20):
            v = rng.standard_normal(d)
            recon = rng.standard_normal(d)
            dead = sorted(rng.choice(h, size=7, replace=False).tolist())
            W = m.W_enc.astype(np.float64)
            a = W @ (v - m.b_pre) + m.b_enc
            sel = top_by_value(a, 3, dead)
            e_hat = sum((max(a[j], 0.0) * W[j] for j in sel), np.zeros(d))
            expect = float(np.sum((v - recon - e_hat) ** 2))
            assert aux_loss(v, recon, m, dead, 3) == pytest.approx(expect, rel=1e-5)


class TestNcl:
    def test_identical_codes(self):
        z = sv(6, {1: 0.5, 4: 0.25})
        assert ncl_loss([z] * 4) == pytest.approx(math.log(4), abs=1e-12)

    def test_disjoint_pair(self):
        expect = -math.log(math.e / (math.e + 1))
        assert expect == pytest.approx(0.3133, abs=1e-4)
        assert ncl_loss([sv(2, {0: 1.0}), sv(2, {1: 1.0})]) == pytest.approx(expect, abs=1e-12)

    def test_supervised_all_distinct(self):
        z = [sv(3, {0: 1.0}), sv(3, {1: 1.0}), sv(3, {2: 1.0})]
        assert ncl_loss(z, labels=[0, 1, 2]) == 0.0

    def test_batch_too_small(self):
        with pytest.raises(ValueError):
            ncl_loss([sv(2, {0: 1.0})])

    def test_large_logits_stay_finite(self):
        Z = np.array([[40.0, 0.0], [0.0, 40.0], [30.0, 30.0]])
        loss, g = ncl_dense(Z)
        assert np.isfinite(loss) and np.all(np.isfinite(g))
        # every self-similarity beats the rest by >= 400 nats
        assert 0.0 <= loss < 1e-100

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 6), st.integers(0, 2**31), st.booleans())
    def test_matches_scalar_oracle(self, B, seed, sup):
        rng = np.random.default_rng(seed)
        Z = np.where(rng.random((B, 5)) < 0.5, rng.random((B, 5)), 0.0)
        labels = rng.integers(0, 2, size=B) if sup else None
        assert ncl_dense(Z, labels)[0] == pytest.approx(reference_ncl(Z, labels), rel=1e-9, abs=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 6), st.integers(0, 2**31), st.booleans())
    def test_permutation_invariant(self, B, seed, sup):
        rng = np.random.default_rng(seed)
        Z = rng.random((B, 4))
        labels = rng.integers(0, 2, size=B) if sup else None
        perm = rng.permutation(B)
        a = ncl_dense(Z, labels)[0]
        b = ncl_dense(Z[perm], None if labels is None else labels[perm])[0]
        assert a == pytest.approx(b, rel=1e-12, abs=1e-15)

    def test_normalized_gradient_vs_fd(self, rng):
        Z = rng.random((4, 5)) + 0.1
        _, g = ncl_dense(Z, normalize=True)
        num = np.zeros_like(Z)
        for i in np.ndindex(Z.shape):
            Zp, Zm = Z.copy(), Z.copy()
            Zp[i] += 1e-5
            Zm[i] -= 1e-5
            num[i] = (ncl_dense(Zp, normalize=True)[0] - ncl_dense(Zm, normalize=True)[0]) / 2e-5
        assert np.max(np.abs(g - num)) < 1e-7


def _cfg(**kw):
    base = dict(k=4, h=16, k_aux=3, beta=0.5, gamma=0.7, batch_size=4)
    base.update(kw)
    return TrainConfig(**base)


TERM_SETS = [("k",), ("4k",), ("aux",), ("ncl",), ("k", "4k", "aux", "ncl")]


def gradient_error(seed, terms, supervised):
    """Worst relative error for one stable instance, or None when unstable."""
    W, b_enc, b_pre, V, dead = tiny_instance(seed)
    labels = np.array([0, 0, 1, 1]) if supervised else None
    cfg = _cfg(supervised=supervised)
    params = {"W_enc": W.copy(), "b_enc": b_enc.copy(), "b_pre": b_pre.copy()}

    def fn(p):
        losses, sig = reference_terms(p["W_enc"], p["b_enc"], p["b_pre"], V, cfg.k, dead, cfg.k_aux, labels)
        return weighted(losses, terms, cfg.beta, cfg.gamma), sig

    numeric, stable = fd_gradients(fn, params)
    if not stable:
        return None
    br = batch_loss_and_grads(SaeModel(**params), V, labels, cfg, np.array(dead), terms=terms)
    assert br.total == pytest.approx(fn(params)[0], rel=1e-12)
    return max_rel_error(br.grads, numeric)


class TestGradients:
    @pytest.mark.parametrize("terms", TERM_SETS, ids=["+".join(t) for t in TERM_SETS])
    @pytest.mark.parametrize("supervised", [False, True])
    def test_against_finite_differences(self, terms, supervised):
        checked = 0
        for seed in range(6):
            err = gradient_error(seed, terms, supervised)
            if err is None:
                continue
            checked += 1
            assert err < 1e-4, (seed, err)
        assert checked >= 3

    def test_perfect_reconstruction_gives_zero(self):
        d = 4
        m = SaeModel(np.eye(d), np.zeros(d), np.zeros(d))
        V = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 2.0, 0.0, 0.0]])
        cfg = TrainConfig(k=1, h=4, beta=0.0, gamma=0.0, batch_size=2)
        br = batch_loss_and_grads(m, V, None, cfg)
        assert br.total == 0.0
        assert all(not g.any() for g in br.grads.values())

    def test_recombination(self, rng):
        W, b_enc, b_pre, V, dead = tiny_instance(1)
        cfg = _cfg()
        br = batch_loss_and_grads(SaeModel(W, b_enc, b_pre), V, None, cfg, np.array(dead))
        assert abs(br.total - br.recombine(cfg.beta, cfg.gamma)) < 1e-6
        assert br.total == pytest.approx(br.l_k + br.l_4k / 8 + cfg.beta * br.l_aux + cfg.gamma * br.l_ncl, rel=1e-12)

    def test_inactive_latents_get_no_encoder_gradient(self):
        W, b_enc, b_pre, V, _ = tiny_instance(2)
        cfg = _cfg(beta=0.0)
        br = batch_loss_and_grads(SaeModel(W, b_enc, b_pre), V, None, cfg, terms=("k", "ncl"))
        quiet = ~br.active
        assert quiet.any()
        assert not br.grads["b_enc"][quiet].any()
        assert not br.grads["W_enc"][quiet].any()

    def test_counters_skip_disabled_terms(self, rng):
        m = init_model(8, 16)
        V = rng.standard_normal((4, 8))
        c = Counter()
        batch_loss_and_grads(m, V, None, _cfg(beta=0.0, gamma=0.0), counter=c)
        assert c["aux_evals"] == 0 and c["ncl_evals"] == 0
        batch_loss_and_grads(m, V, None, _cfg(), counter=c)
        assert c["aux_evals"] == 1 and c["ncl_evals"] == 1

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_raises(self):
        m = SaeModel(np.full((4, 2), np.inf), np.zeros(4), np.zeros(2))
        with pytest.raises(DivergenceError):
            batch_loss_and_grads(m, np.ones((2, 2)), None, TrainConfig(k=1, h=4, gamma=0.0, batch_size=2))

    def test_ncl_batch_of_one_rejected(self):
        with pytest.raises(ValueError):
            batch_loss_and_grads(init_model(2, 4), np.ones((1, 2)), None, TrainConfig(k=1, h=4, batch_size=2))

    def test_unknown_term(self):
        with pytest.raises(ValueError):
            batch_loss_and_grads(init_model(2, 4), np.ones((2, 2)), None, TrainConfig(k=1, h=4, batch_size=2), terms=("x",))

    def test_breakdown_matches_single_sample_helpers(self, rng):
        m = init_model(8, 32, seed=4, data_mean=rng.standard_normal(8))
        V = rng.standard_normal((5, 8))
        cfg = TrainConfig(k=3, h=32, batch_size=5, gamma=0.0, k_aux=4)
        dead = np.arange(0, 32, 3)
        br = batch_loss_and_grads(m, V, None, cfg, dead)
        from csr_embed.model import decode

        lk = np.mean([recon_loss(v, decode(m, encode(m, v, 3))) for v in V])
        la = np.mean([aux_loss(v, decode(m, encode(m, v, 3)), m, dead, 4) for v in V])
        assert br.l_k == pytest.approx(lk, rel=1e-5)
        assert br.l_aux == pytest.approx(la, rel=1e-5)
