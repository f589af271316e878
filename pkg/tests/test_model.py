import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from crab import corpus as cp
from crab import model as md
from crab import numcore as nc
from crab.errors import DimensionError, ModelFormatError

CORPUS = [
    cp.Example("1", "Aurora", "i love aurora today", "FAVOR", True, True),
    cp.Example("2", "Aurora", "shame on borealis", "FAVOR", False, True),
    cp.Example("3", "Borealis", "what about lunch", "NONE", False, False),
    cp.Example("4", "Borealis", "borealis is awful #truth", "AGAINST", True, True),
]
VOCAB = cp.build_vocab(CORPUS)


def make_model(seed=0, **kw):
    kw.setdefault("hidden", 8)
    return md.model_for_vocab(VOCAB, rng=np.random.default_rng(seed), **kw)


def batch():
    return cp.encode_batch(CORPUS, VOCAB)


def random_batch(rng, n=5):
    v, vt, vp = VOCAB.widths
    d = rng.dirichlet(np.ones(v), size=n)
    t = rng.dirichlet(np.ones(vt), size=n)
    pair = np.concatenate([d, t, d * (rng.random((n, v)) < 0.3)], axis=1)
    z = np.zeros(n, dtype=int)
    return cp.EncodedBatch(d, t, pair, z, z, z, [str(i) for i in range(n)], ["Aurora"] * n)


class TestBranchScores:
    def test_zero_heads_give_zero_logits(self):
        s, _ = md.branch_scores(make_model(zero_heads=True), batch())
        for j in (s.j_d, s.j_t, s.j_c):
            assert j.shape == (4, 3) and not j.data.any()

    def test_eval_is_deterministic(self):
        m = make_model()
        a, _ = md.branch_scores(m, batch())
        b, _ = md.branch_scores(m, batch())
        np.testing.assert_array_equal(a.j_c.data, b.j_c.data)

    def test_width_mismatch(self):
        b = batch()
        b.t = b.t[:, :-1]
        with pytest.raises(DimensionError, match="t_feat"):
            md.branch_scores(make_model(), b)

    def test_perturbing_target_leaves_text_branch(self):
        m, b = make_model(), batch()
        before, _ = md.branch_scores(m, b)
        b.t = b.t[:, ::-1].copy()
        after, _ = md.branch_scores(m, b)
        np.testing.assert_array_equal(before.j_d.data, after.j_d.data)
        assert not np.array_equal(before.j_t.data, after.j_t.data)

    def test_branch_isolation_gradients(self):
        m, b = make_model(), batch()
        d, t = nc.parameter(b.d), nc.parameter(b.t)
        j_d = m.affine("head_d", m.encode_branch("d", d))
        j_t = m.affine("head_t", m.encode_branch("t", t))
        grads = nc.backward(nc.sum_all(j_d) + nc.sum_all(j_t * j_t))
        g_d_from_t = nc.backward(nc.sum_all(j_t * j_t)).get(d)
        g_t_from_d = nc.backward(nc.sum_all(j_d)).get(t)
        assert g_d_from_t is None and g_t_from_d is None
        assert grads[d].any() and grads[t].any()

    def test_dropout_only_in_training(self):
        m = make_model(dropout=0.5)
        rng = np.random.default_rng(1)
        train, _ = md.branch_scores(m, batch(), train_flag=True, rng=rng)
        evals, _ = md.branch_scores(m, batch())
        assert not np.array_equal(train.j_d.data, evals.j_d.data)

    def test_label_order_and_width(self):
        m = make_model()
        for name in ("head_d", "head_t", "head_c"):
            assert m.params[f"{name}.w"].shape[1] == 3
        assert m.params["a"].shape == (1,)


class TestFuse:
    def test_zero(self):
        np.testing.assert_allclose(md.fuse(np.zeros(3), np.zeros(3), np.zeros(3)).data, np.log(0.5), rtol=0, atol=1e-15)

    def test_derived_values(self):
        # -softplus(-z) evaluated with mpmath at 30 digits
        out = md.fuse(np.array([4.0, 0.0, -4.0]), np.zeros(3), np.zeros(3)).data
        np.testing.assert_allclose(out, [-0.0181499279178097, -0.693147180559945, -4.01814992791781], atol=1e-12)

    def test_very_negative_sum_is_finite(self):
        out = md.fuse(np.array([-800.0]), np.zeros(1), np.zeros(1)).data
        assert out[0] == -800.0

    @settings(max_examples=50, deadline=None)
    @given(hnp.arrays(np.float64, (3, 3), elements=st.floats(-30, 30)), st.permutations(range(3)))
    def test_permutation_equivariant_and_nonpositive(self, js, perm):
        y = md.fuse(js[0], js[1], js[2]).data
        y_perm = md.fuse(js[0][perm], js[1][perm], js[2][perm]).data
        np.testing.assert_array_equal(y[perm], y_perm)
        assert np.all(y <= 0)


class TestCounterfactual:
    def test_a_zero_blocked_text(self):
        m = make_model(init_a=0.0)
        np.testing.assert_allclose(md.counterfactual_fuse(m, np.zeros((1, 3))).data, np.log(0.5), atol=1e-15)

    @pytest.mark.parametrize("a", np.linspace(-10, 10, 20))
    def test_null_is_uniform(self, a):
        m = make_model(init_a=float(a))
        y = md.null_fuse(m, 2).data
        assert np.all(y == y[0, 0])
        p = np.exp(nc.log_softmax_rows(nc.constant(y)).data)
        np.testing.assert_allclose(p, 1 / 3, atol=1e-15)

    def test_saturation_flattens_counterfactual(self):
        # log sigma(j + 20) for |j| <= 3 spans log sigma(17) - log sigma(23), about 4.1e-8
        m = make_model(init_a=10.0)
        j_d = np.random.default_rng(0).uniform(-3, 3, size=(50, 3))
        y = md.counterfactual_fuse(m, j_d).data
        assert np.max(y.max(axis=1) - y.min(axis=1)) < 0.05

    def test_text_only_argmax_equals_j_d_argmax(self):
        m = make_model(init_a=2.5)
        j_d = np.random.default_rng(3).normal(size=(200, 3)) * 4
        y = md.counterfactual_fuse(m, j_d).data
        np.testing.assert_array_equal(np.argmax(y, axis=1), np.argmax(j_d, axis=1))


class TestEffects:
    def test_algebra_exact_on_random_models(self):
        rng = np.random.default_rng(0)
        for seed in range(30):
            m = make_model(seed, init_a=float(rng.normal() * 5))
            fx = md.decompose_effects(m, random_batch(rng))
            assert np.all(fx.te - fx.nde - fx.tie == 0)
            assert np.all(fx.tie == fx.y_fact - fx.y_cf)

    def test_degenerate_model_has_zero_tie(self):
        m = make_model(zero_heads=True, init_a=0.0)
        fx = md.decompose_effects(m, batch())
        assert not fx.tie.any()

    def test_y_null_rows_constant(self):
        fx = md.decompose_effects(make_model(init_a=-3.0), batch())
        assert np.all(fx.y_null == fx.y_null[0, 0])

    def test_snap_preserves_values_to_rounding(self):
        m = make_model()
        s, _ = md.branch_scores(m, batch())
        raw = md.fuse(s.j_d, s.j_t, s.j_c).data
        np.testing.assert_allclose(md.decompose_effects(m, batch()).y_fact, raw, rtol=0, atol=1e-14)

    def test_softmax_argmax_is_logit_argmax(self):
        v = np.random.default_rng(1).normal(size=(500, 3))
        p = nc.softmax_rows(nc.constant(v)).data
        np.testing.assert_array_equal(np.argmax(p, axis=1), np.argmax(v, axis=1))


class TestAdversarial:
    def test_forward_matches_plain_heads(self):
        m = make_model()
        _, h = md.branch_scores(m, batch())
        with_grl = md.adversarial_forward(m, h)
        without = md.adversarial_forward(m, h, use_grl=False)
        for a, b in zip(with_grl, without):
            np.testing.assert_array_equal(a.data, b.data)

    def _tmt_grads(self, m, lam, use_grl):
        b = batch()
        _, h = md.branch_scores(m, b)
        _, tmt, _ = md.adversarial_forward(m, h, lambda_grl=lam, use_grl=use_grl)
        onehot = np.eye(2)[b.tmt]
        loss = nc.scale(nc.sum_all(nc.log_softmax_rows(tmt) * onehot), -1.0 / len(b))
        grads = nc.backward(loss)
        return {k: grads.get(p) for k, p in m.params.items()}

    @pytest.mark.parametrize("lam", [0.0, 0.5, 1.0, 2.0])
    def test_reversed_encoder_gradient(self, lam):
        m = make_model()
        rev = self._tmt_grads(m, lam, True)
        plain = self._tmt_grads(m, lam, False)
        for k in ("enc_d.l1.w", "enc_d.l2.w", "enc_d.l2.b"):
            np.testing.assert_allclose(rev[k], -lam * plain[k], rtol=0, atol=1e-15)
        # the head itself sits after the reversal and is trained normally
        np.testing.assert_array_equal(rev["head_tmt.w"], plain["head_tmt.w"])

    def test_grad_check_through_reversal(self):
        m = make_model()
        b = batch()
        w0 = m.params["enc_d.l2.w"].data.copy()

        def loss(w):
            m.params["enc_d.l2.w"] = w
            h = m.encode_branch("d", nc.constant(b.d))
            _, tmt, _ = md.adversarial_forward(m, h, lambda_grl=1.0, use_grl=False)
            return nc.sum_all(nc.log_softmax_rows(tmt) * np.eye(2)[b.tmt])

        assert nc.grad_check(loss, w0) < 1e-6
        m.params["enc_d.l2.w"] = nc.parameter(w0, name="enc_d.l2.w")


class TestPersistence:
    def test_round_trip_bitwise(self, tmp_path):
        m = make_model(3)
        path = tmp_path / "m.json"
        md.save(m, path)
        back, meta = md.load(path, expected_fingerprint=VOCAB.fingerprint)
        assert meta["warnings"] == []
        for k, p in m.params.items():
            assert back.params[k].data.tobytes() == p.data.tobytes()
        rb = random_batch(np.random.default_rng(0), 100)
        np.testing.assert_array_equal(md.decompose_effects(m, rb).tie, md.decompose_effects(back, rb).tie)

    def test_save_is_byte_stable(self, tmp_path):
        m = make_model(1)
        md.save(m, tmp_path / "a.json")
        md.save(m, tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "m.json"
        md.save(make_model(), path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(ModelFormatError):
            md.load(path)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "m.json"
        md.save(make_model(), path)
        doc = json.loads(path.read_text())
        doc["format"] = "crab-model/0"
        path.write_text(json.dumps(doc))
        with pytest.raises(ModelFormatError, match="crab-model/0"):
            md.load(path)

    def test_wrong_shape_payload(self, tmp_path):
        path = tmp_path / "m.json"
        md.save(make_model(), path)
        doc = json.loads(path.read_text())
        doc["params"]["a"]["shape"] = [2]
        path.write_text(json.dumps(doc))
        with pytest.raises(ModelFormatError):
            md.load(path)

    def test_fingerprint_mismatch_warns(self, tmp_path):
        path = tmp_path / "m.json"
        md.save(make_model(), path)
        _, meta = md.load(path, expected_fingerprint="0123456789abcdef")
        assert len(meta["warnings"]) == 1 and "fingerprint" in meta["warnings"][0]
