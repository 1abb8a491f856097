import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pulse.core import autodiff as ad
from pulse.core import nn
from pulse.core.autodiff import Tensor, grad
from pulse.core.functional import cosine_similarity, cross_entropy, softmax
from pulse.core.optim import AdamWState, LrSchedule, adamw_step, lr_at_step
from pulse.core.params import ParamStore
from pulse.errors import (DegenerateVector, InvalidArgument, IoError, NumericError,
                          ProtocolViolation, UnsupportedOp)

from oracles import central_difference, rel_error

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(softmax([0, 0]), [0.5, 0.5], atol=1e-12)

    def test_log_weights(self):
        np.testing.assert_allclose(softmax([math.log(1), math.log(2), math.log(3)]),
                                   [1 / 6, 1 / 3, 1 / 2], atol=1e-12)

    def test_no_overflow(self):
        p = softmax([1000, 0])
        assert np.all(np.isfinite(p))
        assert p[0] == pytest.approx(1.0) and p[1] == pytest.approx(0.0, abs=1e-300)

    def test_errors(self):
        with pytest.raises(InvalidArgument):
            softmax([])
        with pytest.raises(NumericError):
            softmax([0.0, float("nan")])

    @given(st.lists(finite, min_size=1, max_size=20), finite)
    def test_sum_and_shift_invariance(self, xs, c):
        p = softmax(xs)
        assert abs(p.sum() - 1.0) <= 1e-6
        np.testing.assert_allclose(softmax(np.array(xs) + c), p, atol=1e-6)


class TestCosine:
    @pytest.mark.parametrize("a,b,want", [
        ([1, 2, 2], [2, 4, 4], 1.0),
        ([1, 0], [0, 1], 0.0),
        ([1, 0], [-1, 0], -1.0),
    ])
    def test_cases(self, a, b, want):
        assert cosine_similarity(a, b) == pytest.approx(want, abs=1e-12)

    def test_errors(self):
        with pytest.raises(DegenerateVector):
            cosine_similarity([0, 0], [1, 0])
        with pytest.raises(InvalidArgument):
            cosine_similarity([1, 0], [1, 0, 0])

    @given(st.lists(st.floats(-1, 1), min_size=3, max_size=3),
           st.floats(0.01, 100), st.floats(0.01, 100))
    def test_scale_invariance(self, a, alpha, beta):
        a = np.array(a) + np.array([2.0, 0, 0])
        b = np.array([0.3, -0.2, 0.9])
        assert cosine_similarity(alpha * a, beta * b) == pytest.approx(cosine_similarity(a, b), abs=1e-6)
        assert -1.0 <= cosine_similarity(a, a * 3) <= 1.0


class TestCrossEntropy:
    def test_uniform_ten(self):
        assert cross_entropy(np.zeros(10), 7) == pytest.approx(math.log(10), abs=1e-9)

    def test_confident(self):
        assert cross_entropy([50, 0, 0], 0) == pytest.approx(0.0, abs=1e-20)

    def test_two_way(self):
        assert cross_entropy([0, 0], 0) == pytest.approx(0.693147, abs=1e-6)

    def test_label_range(self):
        with pytest.raises(InvalidArgument):
            cross_entropy([0, 0], 2)


def _check_grad(build, arrays, tol=1e-3):
    """Analytic gradient in float64 vs central differences."""
    tensors = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True) for k, v in arrays.items()}
    analytic = grad(build(tensors), tensors)

    def f(vals):
        with ad.no_grad():
            return build({k: Tensor(v) for k, v in vals.items()}).item()

    numeric = central_difference(f, arrays)
    for name in arrays:
        assert rel_error(analytic[name], numeric[name]) <= tol, name


rng0 = np.random.default_rng(0)


def U(*shape):
    return rng0.uniform(-1, 1, size=shape)


OP_CASES = {
    "add_broadcast": (lambda t: ((t["a"] + t["b"]) ** 2).sum(), {"a": U(3, 4), "b": U(4)}),
    "sub": (lambda t: ((t["a"] - t["b"]) ** 2).sum(), {"a": U(3, 4), "b": U(3, 1)}),
    "mul": (lambda t: (t["a"] * t["b"]).sum(), {"a": U(2, 3), "b": U(2, 3)}),
    "div": (lambda t: (t["a"] / (t["b"] * t["b"] + 1.0)).sum(), {"a": U(2, 3), "b": U(2, 3)}),
    "neg_pow": (lambda t: (-(t["a"] ** 3)).sum(), {"a": U(5)}),
    "exp_log": (lambda t: ad.log(ad.exp(t["a"]) + 1.0).sum(), {"a": U(4, 2)}),
    "sqrt": (lambda t: ad.sqrt(t["a"] * t["a"] + 1.0).sum(), {"a": U(6)}),
    "relu": (lambda t: (ad.relu(t["a"]) * t["b"]).sum(), {"a": U(3, 3) + 0.05, "b": U(3, 3)}),
    "tanh": (lambda t: ad.tanh(t["a"]).sum(), {"a": U(7)}),
    "matmul": (lambda t: ((t["a"] @ t["b"]) ** 2).sum(), {"a": U(3, 4), "b": U(4, 2)}),
    "batched_matmul": (lambda t: ((t["a"] @ t["b"]) ** 2).mean(), {"a": U(2, 3, 4), "b": U(4, 5)}),
    "sum_axis": (lambda t: (t["a"].sum(axis=1) ** 2).sum(), {"a": U(3, 4)}),
    "mean_axis": (lambda t: (t["a"].mean(axis=0, keepdims=True) * t["b"]).sum(), {"a": U(3, 4), "b": U(1, 4)}),
    "reshape_transpose": (lambda t: (t["a"].reshape(2, 6).T @ t["b"]).sum(), {"a": U(3, 4), "b": U(2, 2)}),
    "getitem": (lambda t: (t["a"][1:, [0, 2, 2]] ** 2).sum(), {"a": U(3, 4)}),
    "take": (lambda t: (ad.take(t["e"], np.array([[0, 2], [2, 1]])) ** 2).sum(), {"e": U(4, 3)}),
    "concat": (lambda t: (ad.concat([t["a"], t["b"]], axis=1) ** 2).sum(), {"a": U(2, 2), "b": U(2, 3)}),
    "softmax": (lambda t: (ad.softmax(t["a"]) * t["b"]).sum(), {"a": U(3, 5), "b": U(3, 5)}),
    "log_softmax": (lambda t: (ad.log_softmax(t["a"]) * t["b"]).sum(), {"a": U(3, 5), "b": U(3, 5)}),
    "layer_norm": (lambda t: (ad.layer_norm(t["x"], t["g"], t["b"]) * t["w"]).sum(),
                   {"x": U(3, 6), "g": U(6), "b": U(6), "w": U(3, 6)}),
    "l2_normalize": (lambda t: (ad.l2_normalize(t["a"] + 2.0) * t["b"]).sum(), {"a": U(3, 4), "b": U(3, 4)}),
    "cosine": (lambda t: ad.cosine(t["a"] + 1.5, t["b"] - 1.5).sum(), {"a": U(4, 5), "b": U(4, 5)}),
    "cross_entropy": (lambda t: ad.cross_entropy(t["z"], [1, 0, 3]), {"z": U(3, 4)}),
    "cross_entropy_weighted": (lambda t: ad.cross_entropy(t["z"], [1, 0, 3], [1.0, 0.0, 2.0]), {"z": U(3, 4)}),
}


@pytest.mark.parametrize("case", sorted(OP_CASES))
def test_gradients_match_finite_differences(case):
    build, arrays = OP_CASES[case]
    _check_grad(build, arrays)


def test_attention_block_gradient():
    rng = np.random.default_rng(3)
    store = ParamStore()
    nn.add_block(store, "blk", 4, rng)
    x = rng.uniform(-1, 1, size=(2, 3, 4))
    mask = np.array([[False, True, True], [True, True, True]])
    bias = nn.attention_bias(mask, causal=True, dtype=np.float64)
    arrays = {n: store[n].data.astype(np.float64) for n in store}
    arrays["x"] = x

    def build(t):
        local = ParamStore()
        for n in store:
            local._entries[n] = t[n]
        # pad query rows are never read downstream, so they are masked out of the loss
        out = nn.block(t["x"], local, "blk", 2, bias) * Tensor(mask[:, :, None].astype(np.float64))
        return (out ** 2).mean()

    _check_grad(build, arrays)


def test_sum_of_squares_gradient():
    store = ParamStore()
    x = store.add("x", [1.0, 2.0])
    g = grad((x * x).sum(), store)
    np.testing.assert_allclose(g["x"], [2.0, 4.0])


def test_frozen_params_absent():
    store = ParamStore()
    a = store.add("a", [1.0, 2.0])
    b = store.add("b", [3.0, 4.0], trainable=False)
    g = grad((a * b).sum(), store)
    assert set(g) == {"a"}
    np.testing.assert_allclose(g["a"], [3.0, 4.0])


def test_unsupported_op_rejected():
    t = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(UnsupportedOp):
        np.sin(t)
    with pytest.raises(UnsupportedOp):
        np.linalg.norm(t)


def test_numpy_scalar_on_left_is_recorded():
    t = Tensor([1.0, 2.0], requires_grad=True)
    out = (np.float32(3.0) * t).sum()
    assert grad(out, {"t": t})["t"].tolist() == [3.0, 3.0]


def test_non_scalar_root_rejected():
    t = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(InvalidArgument):
        grad(t * 2, {"t": t})


class TestAdamW:
    def _store(self):
        s = ParamStore()
        s.add("w", [1.0, -2.0, 0.5])
        return s

    def test_decay_only(self):
        s = self._store()
        before = s["w"].data.copy()
        adamw_step(s, {"w": np.zeros(3)}, AdamWState(weight_decay=0.1), lr=0.01)
        np.testing.assert_allclose(s["w"].data, before * (1 - 0.01 * 0.1), rtol=1e-6)
        assert s.step_count == 1

    def test_first_step_is_sign(self):
        s = ParamStore()
        s.add("w", [0.0])
        adamw_step(s, {"w": np.array([0.37])}, AdamWState(weight_decay=0.0), lr=0.01)
        # m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        assert s["w"].data[0] == pytest.approx(-0.01 * 0.37 / (0.37 + 1e-8), rel=1e-6)

    def test_identity(self):
        s = self._store()
        before = s["w"].data.copy()
        st_ = AdamWState(weight_decay=0.0)
        for _ in range(5):
            adamw_step(s, {"w": np.zeros(3)}, st_, lr=0.1)
        np.testing.assert_array_equal(s["w"].data, before)

    def test_second_moment_nonnegative(self):
        s = self._store()
        st_ = AdamWState()
        for k in range(3):
            adamw_step(s, {"w": np.array([-1.0, 2.0, -3.0]) * k}, st_)
        assert np.all(st_.v["w"] >= 0)
        assert st_.m["w"].shape == s["w"].shape

    def test_shape_mismatch(self):
        with pytest.raises(InvalidArgument):
            adamw_step(self._store(), {"w": np.zeros(2)}, AdamWState())
        with pytest.raises(InvalidArgument):
            adamw_step(self._store(), {"nope": np.zeros(3)}, AdamWState())

    def test_locked_store(self):
        s = self._store()
        s.lock()
        with pytest.raises(ProtocolViolation):
            adamw_step(s, {"w": np.zeros(3)}, AdamWState())


class TestSchedule:
    def test_endpoints(self):
        sch = LrSchedule(base_lr=0.1, total_steps=100)
        assert lr_at_step(sch, 0) == 0.0
        assert lr_at_step(sch, sch.warmup_steps) == pytest.approx(0.1)
        assert lr_at_step(sch, 100) == pytest.approx(0.0, abs=1e-15)
        mid = sch.warmup_steps + (100 - sch.warmup_steps) / 2
        assert lr_at_step(sch, int(mid)) == pytest.approx(0.05, abs=1e-12)
        assert lr_at_step(sch, 101) == 0.0

    @given(st.integers(10, 2000), st.floats(0.05, 0.5))
    @settings(max_examples=50)
    def test_nonnegative_and_continuous(self, total, frac):
        sch = LrSchedule(base_lr=1.0, total_steps=total, warmup_fraction=frac)
        lrs = np.array([lr_at_step(sch, s) for s in range(total + 1)])
        assert np.all(lrs >= 0)
        steps = np.abs(np.diff(lrs))
        w = sch.warmup_steps
        # ramp slope is set by the warmup length, cosine slope by the decay length
        assert np.all(steps[:w] <= 1.0 / w + 1e-12)
        assert np.all(steps[w:] <= math.pi / (2 * (total - w)) + 1e-12)

    @given(st.integers(20, 5000))
    def test_decay_bound_at_default_warmup(self, total):
        sch = LrSchedule(base_lr=1.0, total_steps=total)
        w = sch.warmup_steps
        lrs = np.array([lr_at_step(sch, s) for s in range(w, total + 1)])
        assert np.all(np.abs(np.diff(lrs)) <= 2.0 / total + 1e-12)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(1)
        s = ParamStore()
        s.add("emb", rng.standard_normal((5, 3)))
        s.add("scalarish", [np.pi])
        s.add("naïve.name", rng.standard_normal((2, 2, 2)))
        path = tmp_path / "x.ckpt"
        s.save(path)
        blob = path.read_bytes()
        assert blob[:8] == b"PULSCKPT"
        back = ParamStore.load(path)
        assert back.names() == s.names()
        for n in s:
            assert back[n].data.tobytes() == s[n].data.tobytes()
        assert back.to_bytes() == blob

    def test_layout(self):
        s = ParamStore()
        s.add("ab", np.arange(6, dtype=np.float32).reshape(2, 3))
        blob = s.to_bytes()
        assert blob[8:16] == (1).to_bytes(4, "little") + (1).to_bytes(4, "little")
        assert blob[16:18] == (2).to_bytes(2, "little") and blob[18:20] == b"ab"
        assert blob[20] == 2
        assert blob[21:29] == (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
        assert np.frombuffer(blob[29:], "<f4").tolist() == [0, 1, 2, 3, 4, 5]

    def test_corrupt(self):
        with pytest.raises(IoError):
            ParamStore.from_bytes(b"NOTACKPT" + b"\0" * 8)
        s = ParamStore()
        s.add("a", [1.0, 2.0])
        with pytest.raises(IoError):
            ParamStore.from_bytes(s.to_bytes()[:-2])

    def test_shapes_immutable(self):
        s = ParamStore()
        s.add("a", [1.0, 2.0])
        with pytest.raises(InvalidArgument):
            s.set("a", [1.0])
        with pytest.raises(InvalidArgument):
            s.add("a", [0.0])
