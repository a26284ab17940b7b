"""Autodiff, initialization, optimizer, gradient-check, and checkpoint
tests for the nn core.
"""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from gmvc.errors import InvalidInput, NonFiniteLoss, ShapeError
from gmvc.nn import (
    Adam,
    BLSTM,
    BatchNorm,
    Conv1d,
    LayerCtx,
    LayerSpec,
    Linear,
    ParamStore,
    Tensor,
    forward_backward,
    gradcheck,
    load_checkpoint,
    max_relative_error,
    no_grad,
    save_checkpoint,
    xavier_init,
)
from gmvc.nn import tensor as T


def fresh_store(seed=0, dtype=np.float64):
    return ParamStore(seed, dtype=dtype)


class TestXavierInit:
    def test_fc_bound_and_bias(self):
        store = fresh_store(seed=1)
        Linear(store, "fc", 4, 4)
        xavier_init(store)
        bound = math.sqrt(6.0 / 8.0)
        w = store["fc.w"].data
        assert np.abs(w).max() <= bound
        assert np.abs(w).max() > 0.5 * bound  # actually spread out
        assert_array_equal(store["fc.b"].data, np.zeros(4))

    def test_seed_determinism(self):
        a, b = fresh_store(seed=9), fresh_store(seed=9)
        for s in (a, b):
            Linear(s, "fc", 6, 3)
            Conv1d(s, "cv", 2, 2)
            xavier_init(s)
        for name in a.names():
            assert_array_equal(a[name].data, b[name].data)

    def test_different_names_different_draws(self):
        s = fresh_store(seed=4)
        Linear(s, "a", 5, 5)
        Linear(s, "b", 5, 5)
        xavier_init(s)
        assert np.abs(s["a.w"].data - s["b.w"].data).max() > 1e-3

    def test_registration_order_does_not_matter(self):
        a, b = fresh_store(seed=2), fresh_store(seed=2)
        Linear(a, "p", 3, 3)
        Linear(a, "q", 3, 3)
        Linear(b, "q", 3, 3)
        Linear(b, "p", 3, 3)
        xavier_init(a)
        xavier_init(b)
        assert_array_equal(a["p.w"].data, b["p.w"].data)
        assert_array_equal(a["q.w"].data, b["q.w"].data)

    def test_lstm_forget_gate_bias_is_one(self):
        s = fresh_store(seed=3)
        BLSTM(s, "rnn", 4, 3)
        xavier_init(s)
        b = s["rnn.fw.b"].data  # gate order: input, forget, cell, output
        assert_array_equal(b[3:6], np.ones(3))
        assert_array_equal(b[:3], np.zeros(3))
        assert_array_equal(b[6:], np.zeros(6))

    def test_duplicate_name_rejected(self):
        s = fresh_store()
        Linear(s, "fc", 2, 2)
        with pytest.raises(InvalidInput):
            Linear(s, "fc", 2, 2)


class TestAutodiff:
    def test_linear_gradient_closed_form(self):
        # loss = sum(W x), dW = 1 x^T pattern, db = 1
        s = fresh_store(seed=5)
        fc = Linear(s, "fc", 3, 2)
        xavier_init(s)
        x = np.array([[1.0, 2.0, -1.0]])
        out = fc(Tensor(x))
        T.backward(T.tsum(out))
        assert_allclose(s["fc.w"].grad, np.repeat(x.T, 2, axis=1))
        assert_allclose(s["fc.b"].grad, np.ones(2))

    def test_broadcast_addition_gradients(self):
        a = Tensor(np.zeros((3, 1)), requires_grad=True)
        b = Tensor(np.zeros((1, 4)), requires_grad=True)
        out = T.tsum(T.add(a, b))
        T.backward(out)
        assert_array_equal(a.grad, np.full((3, 1), 4.0))
        assert_array_equal(b.grad, np.full((1, 4), 3.0))

    def test_softmax_rows_sum_to_one_and_max_shift_safe(self):
        x = Tensor(np.array([[1e4, 1e4 + 1.0], [0.0, -1e4]]))
        p = T.softmax(x, axis=1).data
        assert_allclose(p.sum(axis=1), np.ones(2), rtol=1e-12)
        assert np.isfinite(p).all()

    def test_cross_entropy_matches_log_probs(self):
        logits = np.array([[2.0, 0.5, -1.0], [0.0, 0.0, 0.0]])
        labels = np.array([0, 2])
        ce = T.cross_entropy(Tensor(logits), labels).item()
        probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        want = -0.5 * (math.log(probs[0, 0]) + math.log(probs[1, 2]))
        assert ce == pytest.approx(want, rel=1e-12)

    def test_cross_entropy_gradient(self):
        logits = Tensor(np.array([[1.0, -2.0], [0.5, 0.5]]), requires_grad=True)
        labels = np.array([1, 0])
        T.backward(T.cross_entropy(logits, labels))
        p = np.exp(logits.data) / np.exp(logits.data).sum(axis=1, keepdims=True)
        onehot = np.eye(2)[labels]
        assert_allclose(logits.grad, (p - onehot) / 2.0, rtol=1e-12)

    def test_clamp_blocks_gradient_outside_range(self):
        x = Tensor(np.array([-5.0, 0.0, 5.0]), requires_grad=True)
        T.backward(T.tsum(T.clamp(x, -1.0, 1.0)))
        assert_array_equal(x.grad, np.array([0.0, 1.0, 0.0]))

    def test_no_grad_suppresses_graph(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = T.mul(x, x)
        assert y.parents == ()
        assert y.bwd is None

    def test_matmul_shape_error(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_composite_graph_finite_differences(self):
        # conv -> bn -> relu -> blstm -> linear -> sum, float64 end to end
        s = fresh_store(seed=8)
        conv = Conv1d(s, "cv", 2, 3)
        bn = BatchNorm(s, "bn", 3)
        rnn = BLSTM(s, "rnn", 3, 2)
        head = Linear(s, "out", 4, 1)
        xavier_init(s)
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 5, 2))
        ctx = LayerCtx(train=True, update_stats=False)

        def loss():
            h = T.relu(bn(conv(Tensor(x)), ctx))
            h = rnn(h)
            h = head(T.reshape(h, (10, 4)))
            return T.tsum(h)

        report = gradcheck(loss, s, eps=1e-5)
        assert max_relative_error(report) < 1e-6


class TestBatchNorm:
    def test_train_standardizes_batch(self):
        s = fresh_store(seed=0)
        bn = BatchNorm(s, "bn", 4)
        xavier_init(s)
        rng = np.random.default_rng(1)
        x = rng.normal(loc=3.0, scale=2.0, size=(64, 4))
        y = bn(Tensor(x), LayerCtx()).data
        assert_allclose(y.mean(axis=0), np.zeros(4), atol=1e-10)
        assert_allclose(y.std(axis=0), np.ones(4), atol=1e-3)

    def test_running_stats_momentum(self):
        s = fresh_store(seed=0)
        bn = BatchNorm(s, "bn", 2)
        xavier_init(s)
        x = np.array([[1.0, 10.0], [3.0, 14.0]])
        bn(Tensor(x), LayerCtx())
        mean = s.state["bn.running_mean"]
        # one update: 0.9 * init(0) + 0.1 * batch_mean
        assert_allclose(mean, 0.1 * x.mean(axis=0), rtol=1e-12)

    def test_infer_uses_running_stats_not_batch(self):
        s = fresh_store(seed=0)
        bn = BatchNorm(s, "bn", 1)
        xavier_init(s)
        x = np.full((4, 1), 7.0)
        y_infer = bn(Tensor(x), LayerCtx(train=False, update_stats=False)).data
        # fresh running stats are (0, 1): output is roughly x itself
        assert_allclose(y_infer, x, rtol=1e-4)

    def test_constant_input_stays_finite(self):
        s = fresh_store(seed=0)
        bn = BatchNorm(s, "bn", 3)
        xavier_init(s)
        y = bn(Tensor(np.ones((8, 3))), LayerCtx()).data
        assert np.isfinite(y).all()
        assert_allclose(y, np.zeros_like(y), atol=1e-6)


class TestBLSTM:
    def test_output_shape_and_direction_split(self):
        s = fresh_store(seed=2)
        rnn = BLSTM(s, "rnn", 3, 4)
        xavier_init(s)
        rng = np.random.default_rng(2)
        y = rnn(Tensor(rng.normal(size=(2, 6, 3)))).data
        assert y.shape == (2, 6, 8)

    def test_time_reversal_swaps_directions(self):
        s = fresh_store(seed=2)
        rnn = BLSTM(s, "rnn", 3, 4)
        # tie the two directions together so reversal is exact
        xavier_init(s)
        for part in ("wx", "wh", "b"):
            s[f"rnn.bw.{part}"].data[...] = s[f"rnn.fw.{part}"].data
        rng = np.random.default_rng(3)
        x = rng.normal(size=(1, 5, 3))
        y_fwd = rnn(Tensor(x)).data
        y_rev = rnn(Tensor(x[:, ::-1].copy())).data
        assert_allclose(y_rev[:, ::-1, 4:], y_fwd[:, :, :4], atol=1e-12)
        assert_allclose(y_rev[:, ::-1, :4], y_fwd[:, :, 4:], atol=1e-12)


class TestAdam:
    def test_first_step_closed_form(self):
        s = fresh_store(seed=0)
        p = s.add("p", (3,), init="zeros")
        opt = Adam(s, lr=1e-4)
        p.grad[...] = 1.0
        opt.step()
        # mhat = 1, vhat = 1 -> delta = -lr / (1 + eps)
        want = -1e-4 / (1.0 + 1e-8)
        assert_allclose(p.data, np.full(3, want), rtol=1e-12)
        assert_array_equal(p.grad, np.zeros(3))  # zeroed by the step

    def test_two_steps_match_reference_recurrence(self):
        s = fresh_store(seed=0)
        p = s.add("p", (1,), init="zeros")
        opt = Adam(s, lr=0.1)
        grads = [0.4, -0.7]
        m = v = 0.0
        x = 0.0
        for t, g in enumerate(grads, start=1):
            p.grad[...] = g
            opt.step()
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x -= 0.1 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert_allclose(p.data, [x], rtol=1e-12)

    def test_minimizes_quadratic(self):
        s = fresh_store(seed=0)
        p = s.add("p", (2,), init="zeros")
        p.data[...] = [5.0, -3.0]
        opt = Adam(s, lr=0.05)
        for _ in range(2000):
            p.grad[...] = 2.0 * p.data
            opt.step()
        assert np.abs(p.data).max() < 1e-2


class TestGradcheck:
    def test_quadratic_exact(self):
        s = fresh_store(seed=0)
        p = s.add("p", (4,), init="zeros")
        p.data[...] = [1.0, -2.0, 3.0, 0.5]

        def loss():
            return T.scale(T.tsum(T.mul(s["p"], s["p"])), 0.5)

        report = gradcheck(loss, s, eps=1e-5)
        assert max_relative_error(report) < 1e-8
        assert [name for name, _ in report] == ["p"]

    def test_bad_eps_rejected(self):
        s = fresh_store()
        s.add("p", (1,), init="zeros")
        with pytest.raises(InvalidInput):
            gradcheck(lambda: T.tsum(s["p"]), s, eps=0.0)

    def test_coordinate_budget_enforced(self):
        s = fresh_store()
        s.add("big", (401, 251), init="zeros")  # 100,651 coords
        with pytest.raises(InvalidInput):
            gradcheck(lambda: T.tsum(s["big"]), s)

    def test_nonfinite_loss_raises(self):
        s = fresh_store()
        p = s.add("p", (1,), init="zeros")

        def loss():
            return T.tsum(T.log(s["p"]))  # log(0) = -inf

        with np.errstate(divide="ignore"), pytest.raises(NonFiniteLoss):
            gradcheck(loss, s)

    def test_report_sorted_worst_first(self):
        s = fresh_store(seed=1)
        s.add("a", (2,), init="zeros")
        s.add("b", (2,), init="zeros")
        s["a"].data[...] = [0.3, -0.4]
        s["b"].data[...] = [1.5, 0.2]

        def loss():
            cubed = T.mul(s["b"], T.mul(s["b"], s["b"]))
            return T.add(T.tsum(T.mul(s["a"], s["a"])), T.tsum(cubed))

        report = gradcheck(loss, s, eps=1e-3)
        errs = [e for _, e in report]
        assert errs == sorted(errs, reverse=True)


class TestLayerSpec:
    def test_builds_each_kind(self):
        s = fresh_store(seed=0)
        specs = [
            LayerSpec("conv1d", {"c_in": 2, "c_out": 3}),
            LayerSpec("batch_norm", {"channels": 3}),
            LayerSpec("blstm", {"d_in": 3, "hidden": 2}),
            LayerSpec("fully_connected", {"d_in": 4, "d_out": 5}),
            LayerSpec("softmax_head", {"d_in": 5, "classes": 4}),
        ]
        layers = [sp.build(s, f"l{i}") for i, sp in enumerate(specs)]
        xavier_init(s)
        out = forward_backward(layers, np.random.default_rng(0).normal(size=(2, 6, 2)))
        assert out.shape == (2, 6, 4)
        assert_allclose(out.sum(axis=-1), np.ones((2, 6)), rtol=1e-10)

    def test_unknown_kind_rejected(self):
        with pytest.raises(InvalidInput):
            LayerSpec("pool", {}).build(fresh_store(), "x")

    def test_nonpositive_dims_rejected(self):
        with pytest.raises(InvalidInput):
            LayerSpec("conv1d", {"c_in": 0, "c_out": 3}).build(fresh_store(), "x")

    def test_forward_backward_accumulates_gradients(self):
        s = fresh_store(seed=0)
        layer = LayerSpec("fully_connected", {"d_in": 3, "d_out": 2}).build(s, "fc")
        xavier_init(s)
        x = np.ones((4, 3))
        forward_backward([layer], x, upstream=np.ones((4, 2)))
        assert np.abs(s["fc.w"].grad).sum() > 0


class TestCheckpoint:
    def _store_with_model(self, seed):
        s = fresh_store(seed=seed, dtype=np.float32)
        Linear(s, "fc", 3, 2)
        bn = BatchNorm(s, "bn", 2)
        xavier_init(s)
        bn(Tensor(np.random.default_rng(0).normal(size=(8, 2)).astype(np.float32)),
           LayerCtx())
        return s

    def test_round_trip_bit_exact(self, tmp_path):
        s = self._store_with_model(seed=11)
        opt = Adam(s, lr=1e-3)
        s["fc.w"].grad[...] = 0.5
        opt.step()
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(path, s, opt, step=17)

        s2 = self._store_with_model(seed=99)
        opt2 = Adam(s2, lr=1e-3)
        step = load_checkpoint(path, s2, opt2)
        assert step == 17
        assert opt2.t == 17
        for name in s.names():
            assert_array_equal(s2[name].data, s[name].data)
        for name in s.state:
            assert_array_equal(s2.state[name], s.state[name])
        assert_array_equal(opt2.m["fc.w"], opt.m["fc.w"])
        assert_array_equal(opt2.v["fc.w"], opt.v["fc.w"])

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "x.ckpt"
        p.write_bytes(b"JUNKJUNKJUNK")
        s = self._store_with_model(seed=0)
        with pytest.raises(InvalidInput):
            load_checkpoint(str(p), s)

    def test_shape_mismatch_rejected(self, tmp_path):
        s = self._store_with_model(seed=0)
        path = str(tmp_path / "m.ckpt")
        save_checkpoint(path, s, step=1)
        other = fresh_store(seed=0, dtype=np.float32)
        Linear(other, "fc", 4, 2)  # wrong input width
        xavier_init(other)
        with pytest.raises(ShapeError):
            load_checkpoint(path, other)

    def test_resume_without_optimizer_state_still_loads_params(self, tmp_path):
        s = self._store_with_model(seed=5)
        path = str(tmp_path / "m.ckpt")
        save_checkpoint(path, s, optimizer=None, step=3)
        s2 = self._store_with_model(seed=6)
        assert load_checkpoint(path, s2) == 3
        assert_array_equal(s2["fc.w"].data, s["fc.w"].data)
