"""Tensor core tests: analytic cases, finite-difference oracles, optimizer."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vtla import numerics as nm
from vtla.errors import NumericError, ShapeError


def finite_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar f w.r.t. x, elementwise."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def check_grad(build, leaves, rtol=1e-5):
    """Compare tape gradients of build() against central finite differences.

    build() must construct the graph from `leaves` (float64, requires_grad)
    and return the scalar root.
    """
    with nm.Tape() as tape:
        root = build()
    nm.backward(tape, root)
    for name, leaf in leaves.items():
        assert leaf.grad is not None, f"no gradient for {name}"
        fd = finite_difference(lambda: float(build().data), leaf.data)
        scale = np.maximum(np.abs(fd), 1.0)
        err = np.max(np.abs(leaf.grad - fd) / scale)
        assert err < rtol, f"{name}: rel err {err:.3g} >= {rtol}"
        leaf.grad = None


def leaf(rng, shape, lo=-1.0, hi=1.0):
    data = rng.uniform(shape, low=lo, high=hi, dtype=np.float64)
    return nm.tensor(data, requires_grad=True, dtype=np.float64)


class TestMatmul:
    def test_identity(self):
        eye = nm.tensor(np.eye(2))
        a = nm.tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.allclose(nm.matmul(eye, a).data, a.data)

    def test_analytic_2x2(self):
        a = nm.tensor([[1.0, 2.0], [3.0, 4.0]])
        b = nm.tensor([[5.0, 6.0], [7.0, 8.0]])
        assert np.allclose(nm.matmul(a, b).data, [[19.0, 22.0], [43.0, 50.0]])

    def test_shape_error_mentions_both_shapes(self):
        a = nm.zeros((2, 3))
        b = nm.zeros((2, 3))
        with pytest.raises(ShapeError, match=r"2, 3.*2, 3"):
            nm.matmul(a, b)

    def test_grad_sum_ab_is_bt(self):
        rng = nm.SeededRng(0, "matmul-grad")
        a = leaf(rng, (3, 4))
        b = leaf(rng, (4, 2))
        with nm.Tape() as tape:
            root = nm.tsum(nm.matmul(a, b))
        nm.backward(tape, root)
        expected = np.broadcast_to(b.data.sum(axis=1), (3, 4))
        assert np.allclose(a.grad, expected, rtol=1e-12)
        fd = finite_difference(lambda: float(nm.tsum(nm.matmul(a, b)).data), a.data)
        assert np.max(np.abs(a.grad - fd)) < 1e-6

    def test_batched_grad(self):
        rng = nm.SeededRng(1, "matmul-batched")
        a = leaf(rng, (2, 3, 4))
        b = leaf(rng, (2, 4, 3))
        check_grad(lambda: nm.tsum(nm.mul(m := nm.matmul(a, b), m)), {"a": a, "b": b})

    def test_broadcast_weight_grad(self):
        rng = nm.SeededRng(2, "matmul-broadcast")
        a = leaf(rng, (2, 3, 4))
        w = leaf(rng, (4, 5))
        check_grad(lambda: nm.tsum(nm.mul(m := nm.matmul(a, w), m)), {"a": a, "w": w})


class TestSoftmaxCrossEntropy:
    def test_single_logit(self):
        loss = nm.softmax_cross_entropy(nm.tensor([[0.0]]), np.array([0]))
        assert loss.item() == 0.0

    def test_uniform_logits(self):
        loss = nm.softmax_cross_entropy(nm.zeros((1, 4)), np.array([0]))
        assert abs(loss.item() - math.log(4)) < 1e-6

    def test_matches_naive_loop(self):
        rng = nm.SeededRng(3, "ce")
        logits = rng.uniform((3, 5), low=-2, high=2, dtype=np.float64)
        targets = np.array([1, 4, 0])
        expected = 0.0
        for i in range(3):
            e = np.exp(logits[i])
            expected += -np.log(e[targets[i]] / e.sum())
        expected /= 3
        loss = nm.softmax_cross_entropy(nm.tensor(logits, dtype=np.float64), targets)
        assert abs(loss.item() - expected) < 1e-6

    def test_target_out_of_range(self):
        with pytest.raises(IndexError):
            nm.softmax_cross_entropy(nm.zeros((2, 3)), np.array([0, 3]))

    def test_nonnegative_and_softmax_rows_sum_to_one(self):
        rng = nm.SeededRng(4, "ce-prop")
        logits = nm.tensor(rng.uniform((6, 7), low=-4, high=4))
        s = nm.softmax(logits)
        assert np.allclose(s.data.sum(axis=1), 1.0, atol=1e-6)
        loss = nm.softmax_cross_entropy(logits, np.zeros(6, dtype=int))
        assert loss.item() >= 0.0

    def test_grad(self):
        rng = nm.SeededRng(5, "ce-grad")
        logits = leaf(rng, (3, 5), lo=-2, hi=2)
        targets = np.array([0, 2, 4])
        check_grad(lambda: nm.softmax_cross_entropy(logits, targets), {"logits": logits})


class TestLayerNorm:
    def test_constant_row_maps_to_zero(self):
        x = nm.tensor(np.full((2, 4), 3.7))
        out = nm.layer_norm(x, nm.ones((4,)), nm.zeros((4,)))
        assert np.allclose(out.data, 0.0)

    def test_already_normalized_row(self):
        x = nm.tensor([[1.0, -1.0]], dtype=np.float64)
        out = nm.layer_norm(x, nm.ones((2,), dtype=np.float64), nm.zeros((2,), dtype=np.float64), eps=1e-12)
        assert np.allclose(out.data, [[1.0, -1.0]], atol=1e-6)

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            nm.layer_norm(nm.zeros((2, 4)), nm.ones((3,)), nm.zeros((3,)))

    def test_grad(self):
        rng = nm.SeededRng(6, "ln-grad")
        x = leaf(rng, (2, 4))
        gain = leaf(rng, (4,), lo=0.5, hi=1.5)
        bias = leaf(rng, (4,), lo=-0.2, hi=0.2)
        check_grad(lambda: nm.tsum(nm.mul(y := nm.layer_norm(x, gain, bias), y)),
                   {"x": x, "gain": gain, "bias": bias})


class TestBackward:
    def test_sum_gives_ones(self):
        x = nm.tensor(np.arange(6, dtype=np.float32).reshape(2, 3), requires_grad=True)
        with nm.Tape() as tape:
            root = nm.tsum(x)
        nm.backward(tape, root)
        assert np.array_equal(x.grad, np.ones((2, 3), dtype=np.float32))

    def test_half_square_gives_x(self):
        x = nm.tensor([1.0, -2.0, 3.0], requires_grad=True)
        with nm.Tape() as tape:
            root = nm.mul(nm.tsum(nm.mul(x, x)), nm.tensor(0.5))
        nm.backward(tape, root)
        assert np.allclose(x.grad, x.data)

    def test_double_backward_is_error(self):
        x = nm.tensor([1.0], requires_grad=True)
        with nm.Tape() as tape:
            root = nm.tsum(x)
        nm.backward(tape, root)
        with pytest.raises(NumericError):
            nm.backward(tape, root)

    def test_non_scalar_root(self):
        x = nm.tensor([1.0, 2.0], requires_grad=True)
        with nm.Tape() as tape:
            y = nm.mul(x, x)
        with pytest.raises(ShapeError):
            nm.backward(tape, y)

    def test_dangling_root(self):
        x = nm.tensor([1.0], requires_grad=True)
        with nm.Tape() as tape:
            nm.tsum(x)
        stray = nm.tensor(0.0)
        with pytest.raises(NumericError):
            nm.backward(tape, stray)


class TestOpGradients:
    """Finite-difference oracle per primitive, float64, h=1e-5."""

    @pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
    def test_binary_broadcast(self, op):
        rng = nm.SeededRng(7, f"bin-{op}")
        a = leaf(rng, (3, 4), lo=0.5, hi=2.0)
        b = leaf(rng, (4,), lo=0.5, hi=2.0)
        fn = getattr(nm, op)
        check_grad(lambda: nm.tsum(nm.mul(y := fn(a, b), y)), {"a": a, "b": b})

    @pytest.mark.parametrize("op,lo,hi", [
        ("exp", -1, 1), ("log", 0.5, 2.0), ("sqrt", 0.5, 2.0),
        ("tanh", -2, 2), ("relu", -1, 1), ("gelu", -2, 2), ("neg", -1, 1),
    ])
    def test_unary(self, op, lo, hi):
        rng = nm.SeededRng(8, f"un-{op}")
        x = leaf(rng, (2, 5), lo=lo, hi=hi)
        fn = getattr(nm, op)
        check_grad(lambda: nm.tsum(nm.mul(y := fn(x), y)), {"x": x})

    def test_softmax(self):
        rng = nm.SeededRng(9, "softmax-grad")
        x = leaf(rng, (3, 4), lo=-2, hi=2)
        w = nm.tensor(rng.uniform((3, 4), dtype=np.float64), dtype=np.float64)
        check_grad(lambda: nm.tsum(nm.mul(nm.softmax(x), w)), {"x": x})

    def test_shape_ops(self):
        rng = nm.SeededRng(10, "shape-grad")
        x = leaf(rng, (2, 3, 4))
        def build():
            y = nm.transpose(nm.reshape(x, (6, 4)), (1, 0))
            z = nm.concat([nm.narrow(y, 1, 0, 3), nm.narrow(y, 1, 3, 3)], axis=1)
            return nm.tsum(nm.mul(z, z))
        check_grad(build, {"x": x})

    def test_gather_rows(self):
        rng = nm.SeededRng(11, "gather-grad")
        table = leaf(rng, (5, 3))
        idx = np.array([0, 2, 2, 4])
        check_grad(lambda: nm.tsum(nm.mul(y := nm.gather_rows(table, idx), y)), {"table": table})

    def test_linear(self):
        rng = nm.SeededRng(12, "linear-grad")
        x = leaf(rng, (2, 3, 4))
        w = leaf(rng, (4, 5))
        b = leaf(rng, (5,))
        check_grad(lambda: nm.tsum(nm.mul(y := nm.linear(x, w, b), y)), {"x": x, "w": w, "b": b})

    def test_bce_with_logits(self):
        rng = nm.SeededRng(13, "bce-grad")
        logits = leaf(rng, (6,), lo=-2, hi=2)
        labels = np.array([1, 0, 1, 1, 0, 0], dtype=np.float64)
        check_grad(lambda: nm.bce_with_logits(logits, labels), {"logits": logits})

    def test_clip_and_mean(self):
        rng = nm.SeededRng(14, "clip-grad")
        x = leaf(rng, (8,), lo=-2, hi=2)
        check_grad(lambda: nm.tmean(nm.mul(y := nm.clip(x, -0.9, 0.9), y)), {"x": x})

    def test_l2_normalize(self):
        rng = nm.SeededRng(15, "l2n-grad")
        x = leaf(rng, (3, 4), lo=0.2, hi=1.0)
        w = nm.tensor(rng.uniform((3, 4), dtype=np.float64), dtype=np.float64)
        check_grad(lambda: nm.tsum(nm.mul(nm.l2_normalize(x), w)), {"x": x})
        norms = np.linalg.norm(nm.l2_normalize(x).data, axis=1)
        assert np.allclose(norms, 1.0, atol=1e-9)

    @settings(max_examples=20, deadline=None)
    @given(rows=st.integers(1, 4), cols=st.integers(1, 4), seed=st.integers(0, 10_000))
    def test_property_random_shapes(self, rows, cols, seed):
        rng = nm.SeededRng(seed, "prop-grad")
        x = leaf(rng, (rows, cols), lo=-1.5, hi=1.5)
        check_grad(lambda: nm.tmean(nm.gelu(nm.mul(x, x))), {"x": x})


class TestCheckedMode:
    def test_nan_raises(self):
        x = nm.tensor([-1.0])
        with pytest.raises(NumericError):
            nm.log(x)

    def test_unchecked_passes_through(self):
        prev = nm.set_checked(False)
        try:
            out = nm.log(nm.tensor([-1.0]))
            assert np.isnan(out.data).all()
        finally:
            nm.set_checked(prev)


class TestAdamW:
    def test_zero_grad_zero_decay_is_identity(self):
        p = nm.tensor([1.0, 2.0], requires_grad=True)
        state = nm.OptimState(weight_decay=0.0)
        before = p.data.copy()
        nm.adamw_step({"p": p}, {"p": np.zeros(2, dtype=np.float32)}, state, lr=0.1)
        assert np.array_equal(p.data, before)

    def test_first_step_is_signed_lr(self):
        p = nm.tensor([1.0, -1.0, 0.5], requires_grad=True)
        g = np.array([0.3, -0.7, 0.01], dtype=np.float32)
        state = nm.OptimState(weight_decay=0.0, eps=1e-8)
        before = p.data.copy()
        nm.adamw_step({"p": p}, {"p": g}, state, lr=1e-2)
        step = before - p.data
        # from zero moments, m_hat/sqrt(v_hat) == g/|g| up to eps
        assert np.allclose(step, 1e-2 * np.sign(g), rtol=1e-4)

    def test_converges_on_quadratic(self):
        w = nm.tensor([0.0], requires_grad=True)
        state = nm.OptimState(weight_decay=0.0)
        for _ in range(100):
            g = 2.0 * (w.data - 3.0)
            nm.adamw_step({"w": w}, {"w": g.astype(np.float32)}, state, lr=0.1)
        assert abs(w.data[0] - 3.0) < 1e-2

    def test_lr_zero_is_identity(self):
        p = nm.tensor([1.0, 2.0], requires_grad=True)
        state = nm.OptimState(weight_decay=0.5)
        before = p.data.copy()
        nm.adamw_step({"p": p}, {"p": np.array([0.4, -0.2], dtype=np.float32)}, state, lr=0.0)
        assert np.array_equal(p.data, before)

    def test_shape_mismatch(self):
        p = nm.tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ShapeError):
            nm.adamw_step({"p": p}, {"p": np.zeros(3, dtype=np.float32)}, nm.OptimState(), lr=0.1)


class TestLrSchedule:
    def test_endpoints(self):
        assert nm.lr_schedule(0, 2.5e-5, 1000, 30000, 2.5e-6) == 0.0
        assert nm.lr_schedule(1000, 2.5e-5, 1000, 30000, 2.5e-6) == 2.5e-5
        assert nm.lr_schedule(30000, 2.5e-5, 1000, 30000, 2.5e-6) == 2.5e-6

    def test_continuity_at_junction(self):
        left = nm.lr_schedule(1000, 2.5e-5, 1000, 30000, 2.5e-6)
        right = 2.5e-6 + 0.5 * (2.5e-5 - 2.5e-6) * (1.0 + math.cos(0.0))
        assert abs(left - right) < 1e-18

    def test_warmup_longer_than_total(self):
        with pytest.raises(ShapeError):
            nm.lr_schedule(0, 1e-3, 100, 50)

    @settings(max_examples=30, deadline=None)
    @given(step=st.integers(0, 30000))
    def test_monotone_decay_after_warmup(self, step):
        lr = nm.lr_schedule(step, 2.5e-5, 1000, 30000, 2.5e-6)
        assert 0.0 <= lr <= 2.5e-5


class TestSeededRng:
    def test_same_seed_same_sequence(self):
        a = nm.SeededRng(42, "s").normal((5,))
        b = nm.SeededRng(42, "s").normal((5,))
        assert np.array_equal(a, b)

    def test_streams_independent(self):
        root = nm.SeededRng(42)
        a = root.child("a").normal((100,))
        b = root.child("b").normal((100,))
        assert not np.array_equal(a, b)
        # re-deriving a child stream is unaffected by other consumers
        again = nm.SeededRng(42).child("a").normal((100,))
        assert np.array_equal(a, again)

    def test_truncated_normal_within_bounds(self):
        vals = nm.SeededRng(7, "tn").truncated_normal((2000,), std=0.02)
        assert np.abs(vals).max() <= 0.04 + 1e-9


class TestCheckpoint:
    def test_round_trip_byte_exact(self, tmp_path):
        rng = nm.SeededRng(1, "ckpt")
        records = {
            "layer.w": rng.normal((3, 4)),
            "layer.b": rng.normal((4,)),
            "scalar": np.float32(0.25).reshape(()),
        }
        p1 = tmp_path / "a.vtlf"
        nm.save_checkpoint(p1, records, meta={"provenance": "scratch"})
        loaded, meta = nm.load_checkpoint(p1)
        assert meta == {"provenance": "scratch"}
        for k in records:
            assert np.array_equal(loaded[k], np.asarray(records[k], dtype=np.float32))
        p2 = tmp_path / "b.vtlf"
        nm.save_checkpoint(p2, loaded, meta=meta)
        assert p1.read_bytes() == p2.read_bytes()

    def test_magic_rejected(self, tmp_path):
        p = tmp_path / "bad.vtlf"
        p.write_bytes(b"NOPE" + b"\x00" * 16)
        from vtla.errors import CompatibilityError
        with pytest.raises(CompatibilityError):
            nm.load_checkpoint(p)

    def test_starts_with_magic_and_version(self):
        blob = nm.serialize({"x": np.zeros((2,), dtype=np.float32)})
        assert blob[:4] == b"VTLF"
        assert int.from_bytes(blob[4:6], "little") == 1
