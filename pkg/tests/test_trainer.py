import math
from dataclasses import replace

import numpy as np
import pytest

from crab import corpus as cp
from crab import model as md
from crab import numcore as nc
from crab import trainer as tr
from crab.corpus import SyntheticSpec
from crab.errors import ContractError
from crab.numcore import AdamState

SMALL = SyntheticSpec(n_train=240, n_test=120, seed=11)
TRAIN, IID, ANTI = cp.gen_synthetic(SMALL)
VOCAB = cp.build_vocab(TRAIN)
BATCH = cp.encode_batch(TRAIN[:32], VOCAB)


def make_model(seed=0, **kw):
    kw.setdefault("hidden", 8)
    return md.model_for_vocab(VOCAB, rng=np.random.default_rng(seed), **kw)


def quick(**kw):
    base = dict(epochs=2, hidden=8, dropout=0.0, batch_size=16, seed=0)
    base.update(kw)
    return tr.TrainConfig(**base)


class TestClsLoss:
    def test_uniform_logits(self):
        _, comps = tr.compute_cls_loss(make_model(zero_heads=True), BATCH)
        assert comps["l_c"] == pytest.approx(math.log(3), abs=1e-12)
        assert comps["l_d"] == pytest.approx(math.log(3), abs=1e-12)
        assert comps["l_tmt"] == pytest.approx(math.log(2), abs=1e-12)
        assert comps["l_stt"] == pytest.approx(math.log(2), abs=1e-12)

    def test_total_follows_weights(self):
        _, comps = tr.compute_cls_loss(make_model(), BATCH, tr.TrainConfig(lambda1=0.1, lambda2=0.2))
        expected = comps["l_c"] + comps["l_d"] + 0.1 * comps["l_tmt"] + 0.2 * comps["l_stt"]
        assert comps["total"] == pytest.approx(expected, rel=1e-14)

    def test_zero_weights_leave_main_terms(self):
        _, comps = tr.compute_cls_loss(make_model(), BATCH, tr.TrainConfig(lambda1=0.0, lambda2=0.0))
        assert comps["total"] == comps["l_c"] + comps["l_d"]

    def test_sharp_correct_prediction_limit(self):
        favor = [e for e in TRAIN if e.stance == "FAVOR"][:8]
        b = cp.encode_batch(favor, VOCAB)
        losses = []
        for temp in (1.0, 10.0, 100.0):
            m = make_model(zero_heads=True)
            m.params["head_c.b"].data = np.array([[temp, -temp, -temp]])
            losses.append(tr.compute_cls_loss(m, b)[1]["l_c"])
        assert losses[0] > losses[1] > losses[2] and losses[2] < 1e-12

    def test_unset_label_is_contract_error(self):
        plain = [replace(e, tmt_label=None) for e in TRAIN[:4]]
        b = cp.encode_batch(plain, VOCAB)
        with pytest.raises(ContractError, match="tmt"):
            tr.compute_cls_loss(make_model(), b)
        # disabling the term lifts the requirement
        tr.compute_cls_loss(make_model(), b, tr.TrainConfig(use_tmt=False))

    def test_ablation_zeroes_terms(self):
        _, comps = tr.compute_cls_loss(make_model(), BATCH, tr.TrainConfig(use_tmt=False, use_stt=False))
        assert comps["l_tmt"] == comps["l_stt"] == 0.0

    def test_reversal_flips_subtask_gradient_on_encoder(self):
        m = make_model()

        def grads(**kw):
            loss, _ = tr.compute_cls_loss(m, BATCH, tr.TrainConfig(lambda1=0.3, lambda2=0.3, **kw))
            g = nc.backward(loss)
            return {k: g[m.params[k]] for k in ("enc_d.l1.w", "enc_d.l2.w")}

        base = grads(use_tmt=False, use_stt=False)
        on, off = grads(use_grl=True), grads(use_grl=False)
        for k in base:
            sub_on, sub_off = on[k] - base[k], off[k] - base[k]
            np.testing.assert_allclose(sub_on, -sub_off, atol=1e-12)
            big = np.abs(sub_off) > 1e-8
            assert big.any() and np.all(np.sign(sub_on[big]) == -np.sign(sub_off[big]))


class TestKL:
    def test_identical_distributions_give_entropy(self):
        m = make_model(init_a=0.0)
        for name in ("head_t", "head_c"):
            m.params[f"{name}.w"].data[:] = 0.0
            m.params[f"{name}.b"].data[:] = 0.0
        s, _ = md.branch_scores(m, BATCH)
        p = nc.softmax_rows(md.fuse(s.j_d, s.j_t, s.j_c)).data
        entropy_term = float(np.mean(-p * np.log(p)))
        assert float(tr.compute_kl_loss(m, BATCH).data[0]) == pytest.approx(entropy_term, rel=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_step_changes_only_a(self, seed):
        rng = np.random.default_rng(seed)
        m = make_model(seed, init_a=float(rng.normal()))
        before = m.state()
        tr.kl_step(m, BATCH.take(rng.permutation(len(BATCH))[:8]), AdamState(lr=1e-2))
        after = m.state()
        for k in before:
            if k == "a":
                assert after[k][0] != before[k][0]
            else:
                assert after[k].tobytes() == before[k].tobytes()

    def test_empty_batch(self):
        with pytest.raises(ContractError):
            tr.compute_kl_loss(make_model(), BATCH.take([]))

    @pytest.mark.parametrize("a0", [-4.0, 0.0, 6.0])
    def test_frozen_model_descends(self, a0):
        # at the training learning rate; a larger step lets Adam's momentum
        # overshoot the 1-D minimum by more than the slack
        m = make_model(2, init_a=a0)
        state = AdamState(lr=1e-3)
        losses = [float(tr.compute_kl_loss(m, BATCH).data[0])]
        for _ in range(100):
            tr.kl_step(m, BATCH, state)
            losses.append(float(tr.compute_kl_loss(m, BATCH).data[0]))
        assert all(b <= a + 1e-9 for a, b in zip(losses, losses[1:]))
        assert losses[-1] < losses[0]

    def test_a_is_clipped(self):
        m = make_model(init_a=49.999)
        tr.kl_step(m, BATCH, AdamState(lr=10.0), a_limit=50.0)
        assert abs(m.a) <= 50.0


class TestTrain:
    def test_zero_epochs(self):
        model, history = tr.train(quick(epochs=0), TRAIN, IID)
        assert len(history) == 0 and history.best_epoch is None
        fresh = md.model_for_vocab(VOCAB, rng=nc.RngStreams(0).get("init"), hidden=8, dropout=0.0)
        for k, p in fresh.params.items():
            assert model.params[k].data.tobytes() == p.data.tobytes()

    def test_empty_train_set(self):
        with pytest.raises(ContractError):
            tr.train(quick(), [], IID)

    @pytest.mark.parametrize("field,value", [("lambda1", -0.1), ("val_fraction", 1.0), ("objective", "lmh")])
    def test_invalid_config(self, field, value):
        with pytest.raises(ContractError):
            tr.train(quick(**{field: value}), TRAIN, IID)

    def test_deterministic(self):
        a_model, a_hist = tr.train(quick(dropout=0.3), TRAIN, IID)
        b_model, b_hist = tr.train(quick(dropout=0.3), TRAIN, IID)
        assert a_hist.to_csv() == b_hist.to_csv()
        assert a_model.fingerprint() == b_model.fingerprint()

    def test_history_shape(self):
        _, hist = tr.train(quick(epochs=3, patience=10), TRAIN, IID)
        lines = hist.to_csv().splitlines()
        assert lines[0] == "epoch,l_c,l_d,l_tmt,l_stt,l_kl,val_f1,a"
        assert len(lines) == 4
        for r in hist.records:
            assert all(math.isfinite(v) for v in (r.l_c, r.l_d, r.l_tmt, r.l_stt, r.l_kl, r.a))
            assert abs(r.a) < 100

    def test_early_stop_and_best_epoch(self):
        _, hist = tr.train(quick(epochs=30, patience=1, learning_rate=3e-2), TRAIN, IID)
        best = max(r.val_f1 for r in hist.records)
        assert hist.records[hist.best_epoch - 1].val_f1 == best
        assert len(hist) < 30

    @pytest.mark.parametrize("seed", range(5))
    def test_training_reduces_cls_loss(self, seed):
        cfg = quick(seed=seed, epochs=3)
        init_model, _ = tr.train(replace(cfg, epochs=0), TRAIN, IID)
        enc = cp.encode_batch(TRAIN, init_model.vocab)
        initial = tr.compute_cls_loss(init_model, enc, cfg)[1]["total"]
        model, hist = tr.train(cfg, TRAIN, IID)
        final = tr.compute_cls_loss(model, enc, cfg)[1]["total"]
        assert final < initial
        assert all(abs(r.a) < 100 for r in hist.records)

    def test_kl_only_touches_a_along_the_trajectory(self):
        # Replaying the run without the KL step, but with a copied in from
        # the KL run after every batch, reproduces every other parameter bitwise.
        cfg = quick()
        enc = cp.encode_batch(TRAIN, VOCAB)
        with_kl, without = make_model(5, dropout=0.0), make_model(5, dropout=0.0)
        s1, s2, s_kl = AdamState(lr=1e-3), AdamState(lr=1e-3), AdamState(lr=1e-3)
        rng1, rng2 = np.random.default_rng(0), np.random.default_rng(0)
        for start in range(0, 96, 16):
            b = enc.take(np.arange(start, start + 16))
            tr.cls_step(with_kl, b, cfg, s1, rng1)
            tr.kl_step(with_kl, b, s_kl)
            tr.cls_step(without, b, cfg, s2, rng2)
            for k, p in with_kl.params.items():
                if k != "a":
                    assert p.data.tobytes() == without.params[k].data.tobytes()
            without.params["a"].data = with_kl.params["a"].data.copy()

    def test_first_batch_identical_without_kl(self):
        cfg = quick()
        b = BATCH.take(np.arange(16))
        m1, m2 = make_model(4), make_model(4)
        tr.cls_step(m1, b, cfg, AdamState(), np.random.default_rng(0))
        tr.kl_step(m1, b, AdamState())
        tr.cls_step(m2, b, cfg, AdamState(), np.random.default_rng(0))
        for k in m1.params:
            if k != "a":
                assert m1.params[k].data.tobytes() == m2.params[k].data.tobytes()

    def test_text_only_objective_ignores_fusion_branches(self):
        model, _ = tr.train(quick(objective="text_only"), TRAIN, IID)
        init_model, _ = tr.train(quick(objective="text_only", epochs=0), TRAIN, IID)
        for k in ("enc_t.l1.w", "head_c.w", "head_tmt.w"):
            assert model.params[k].data.tobytes() == init_model.params[k].data.tobytes()

    def test_poe_needs_bias_model(self):
        with pytest.raises(ContractError, match="bias"):
            tr.train(quick(objective="poe"), TRAIN, IID)

    def test_poe_objective_trains(self):
        bias, _ = tr.train(quick(objective="text_only"), TRAIN, IID)
        model, hist = tr.train(quick(objective="poe"), TRAIN, IID, bias_model=bias)
        assert len(hist) == 2 and all(r.l_d == 0.0 and r.l_kl == 0.0 for r in hist.records)


def test_synthetic_validation_floor():
    # the separable task is learned: validation TIE macro-F1 well above 0.9
    train, _, _ = cp.gen_synthetic(SyntheticSpec(seed=0))
    tr_set, val_set = cp.split_train_val(train, 0.15, 0)
    _, hist = tr.train(tr.TrainConfig(seed=0, dropout=0.0, patience=20), tr_set, val_set)
    assert max(r.val_f1 for r in hist.records) > 0.9
