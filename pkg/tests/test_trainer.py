import math
from collections import Counter

import numpy as np
import pytest

from csr_embed.config import TrainConfig, format_config, load_config, parse_config
from csr_embed.io import FormatError
from csr_embed.model import encode_batch, init_model
from csr_embed.synthetic import GaussianMixture
from csr_embed.trainer import (
    Adam,
    DeadLatentTracker,
    TrainingDiverged,
    TrainReport,
    checkpoint,
    dead_fraction,
    resume,
    train,
)


@pytest.fixture(scope="module")
def small_data():
    X, y = GaussianMixture.make(d=16, n_classes=4, seed=1).sample(256, seed=2)
    return X, y


def small_cfg(**kw):
    base = dict(k=4, h=32, epochs=2, batch_size=16, lr=1e-3)
    base.update(kw)
    return TrainConfig(**base)


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.k_aux, c.beta, c.gamma, c.lr, c.adam_eps, c.weight_decay) == (512, 1 / 32, 1.0, 4e-5, 6.25e-10, 1e-4)

    def test_parse_with_fraction_and_comments(self):
        c = parse_config("k = 16  # sparsity\nbeta=1/32\n\nsupervised=true\n")
        assert c.k == 16 and c.beta == 1 / 32 and c.supervised

    def test_round_trip(self, tmp_path):
        c = TrainConfig(k=3, h=12, gamma=0.1, supervised=True)
        p = tmp_path / "c.txt"
        p.write_text(format_config(c))
        assert load_config(p) == c

    @pytest.mark.parametrize(
        "text",
        ["k=0", "k=9\nh=8", "unknown=1", "lr=-1", "gamma=1\nbatch_size=1", "k", "supervised=maybe"],
    )
    def test_rejects(self, text):
        with pytest.raises(ValueError):
            parse_config(text)


class TestTracker:
    def test_fresh_is_alive(self):
        assert dead_fraction(DeadLatentTracker(10, 3)) == 0.0

    def test_all_firing_stays_alive(self):
        t = DeadLatentTracker(4, 2)
        for _ in range(10):
            t.update(np.ones(4, bool))
        assert dead_fraction(t) == 0.0

    def test_matches_brute_force_history(self, rng):
        h, window = 12, 5
        t = DeadLatentTracker(h, window)
        history = []
        for step in range(1, 101):
            active = rng.random(h) < 0.08
            t.update(active)
            history.append(active)
            # brute force: dead iff no firing in the last `window` steps and
            # the implicit firing at step 0 is also out of the window
            for j in range(h):
                fired = [s for s, a in enumerate(history, 1) if a[j]]
                last = fired[-1] if fired else 0
                assert t.dead_mask()[j] == (step - last > window)


class TestAdam:
    def test_matches_scalar_reference(self, rng):
        lr, b1, b2, eps, wd = 1e-2, 0.9, 0.999, 6.25e-10, 1e-2
        p = {"w": rng.standard_normal(3), "b": rng.standard_normal(2)}
        ref = {k: v.tolist() for k, v in p.items()}
        opt = Adam(lr, (b1, b2), eps, wd, decay=("w",))
        m = {k: [0.0] * len(v) for k, v in ref.items()}
        v = {k: [0.0] * len(x) for k, x in ref.items()}
        for t in range(1, 1001):
            grads = {k: np.sin(np.arange(len(x)) + t * 0.37) + 0.1 * np.asarray(ref[k]) for k, x in ref.items()}
            opt.step(p, {k: g.copy() for k, g in grads.items()})
            for k in ref:
                for i in range(len(ref[k])):
                    g = grads[k][i]
                    m[k][i] = b1 * m[k][i] + (1 - b1) * g
                    v[k][i] = b2 * v[k][i] + (1 - b2) * g * g
                    if k == "w":
                        ref[k][i] -= lr * wd * ref[k][i]
                    mh = m[k][i] / (1 - b1**t)
                    vh = v[k][i] / (1 - b2**t)
                    ref[k][i] -= lr * mh / (math.sqrt(vh) + eps)
        for k in ref:
            assert np.max(np.abs(p[k] - np.array(ref[k]))) < 1e-12

    def test_decay_only_on_selected(self):
        p = {"w": np.ones(1), "b": np.ones(1)}
        Adam(0.1, weight_decay=0.5, decay=("w",)).step(p, {"w": np.zeros(1), "b": np.zeros(1)})
        assert p["w"][0] == pytest.approx(0.95) and p["b"][0] == 1.0


class TestTrain:
    def test_zero_epochs_returns_init(self, small_data):
        X, _ = small_data
        init = init_model(16, 32, seed=5)
        m, rep = train(X, None, small_cfg(epochs=0), init=init)
        assert m == init and rep.epochs == []

    def test_repeated_vector_converges(self, rng):
        v = rng.standard_normal(8).astype(np.float32)
        X = np.tile(v, (64, 1))
        cfg = TrainConfig(k=1, h=16, beta=0.0, gamma=0.0, lr=1e-2, epochs=30, batch_size=8, weight_decay=0.0)
        # zero b_pre so the fit is not trivially given by the data mean
        _, rep = train(X, None, cfg, init=init_model(8, 16, seed=0))
        initial = float(v.astype(np.float64) @ v)
        assert rep.epochs[-1]["l_k"] < 1e-3 * initial

    def test_deterministic(self, small_data):
        X, y = small_data
        a, ra = train(X, y, small_cfg(supervised=True))
        b, rb = train(X, y, small_cfg(supervised=True))
        assert a == b
        assert ra.to_lines() == rb.to_lines()

    def test_output_is_float32(self, small_data):
        m, _ = train(small_data[0], None, small_cfg(epochs=1))
        assert m.W_enc.dtype == np.float32

    def test_report_fields(self, small_data, tmp_path):
        _, rep = train(small_data[0], None, small_cfg())
        assert len(rep.epochs) == 2
        for r in rep.epochs:
            assert r["total"] == pytest.approx(r["l_k"] + r["l_4k"] / 8 + r["l_aux"] / 32 + r["l_ncl"], rel=1e-9)
            assert 0.0 <= r["dead_fraction"] <= 1.0
        rep.write(tmp_path / "r.jsonl")
        assert TrainReport.read(tmp_path / "r.jsonl").epochs == rep.epochs

    def test_loss_decreases(self, small_data):
        _, rep = train(small_data[0], None, small_cfg(epochs=5))
        assert rep.epochs[-1]["total"] < rep.epochs[0]["total"]

    def test_counters_for_disabled_terms(self, small_data):
        c = Counter()
        train(small_data[0], None, small_cfg(beta=0.0, gamma=0.0), counter=c)
        assert c["aux_evals"] == 0 and c["ncl_evals"] == 0
        train(small_data[0], None, small_cfg(), counter=c)
        assert c["aux_evals"] == c["ncl_evals"] == 2 * 256 // 16

    def test_history_drives_tracker(self, small_data):
        cfg = small_cfg(dead_window=4, epochs=3)
        hist = []
        _, rep = train(small_data[0], None, cfg, history=hist)
        t = DeadLatentTracker(cfg.h, cfg.dead_window)
        for a in hist:
            t.update(a)
        assert dead_fraction(t) == rep.epochs[-1]["dead_fraction"]

    def test_not_enough_rows(self):
        with pytest.raises(ValueError):
            train(np.zeros((3, 4), np.float32), None, small_cfg(h=8))

    def test_supervised_needs_labels(self, small_data):
        with pytest.raises(ValueError):
            train(small_data[0], None, small_cfg(supervised=True))

    def test_divergence_keeps_last_good(self, small_data):
        X = small_data[0].copy()
        X[200] = np.nan
        with pytest.raises(TrainingDiverged) as err:
            with np.errstate(all="ignore"):
                train(X, None, small_cfg(gamma=0.0, beta=0.0), init=init_model(16, 32))
        assert err.value.model.is_finite()


class TestCheckpoint:
    def test_resume_bit_exact(self, small_data, tmp_path):
        m, _ = train(small_data[0], None, small_cfg(epochs=1))
        p = tmp_path / "m.bin"
        checkpoint(m, p)
        back = resume(p)
        assert back == m
        assert encode_batch(back, small_data[0], 4) == encode_batch(m, small_data[0], 4)

    def test_resume_truncated(self, tmp_path):
        p = tmp_path / "m.bin"
        checkpoint(init_model(4, 8), p)
        p.write_bytes(p.read_bytes()[:-4])
        with pytest.raises(FormatError):
            resume(p)

    def test_resume_version_mismatch(self, tmp_path):
        p = tmp_path / "m.bin"
        checkpoint(init_model(4, 8), p)
        raw = bytearray(p.read_bytes())
        raw[4] = 7
        p.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            resume(p)
