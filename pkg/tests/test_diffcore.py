import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ntsnet.diffcore import (
    CheckpointError,
    GraphError,
    NumericalError,
    OptimState,
    ParamSet,
    ShapeError,
    Tensor,
    grad_check,
    load_checkpoint,
    no_grad,
    ops,
    save_checkpoint,
    sgd_momentum_step,
)
from ntsnet.diffcore.checkpoint import dumps, loads


def _leaf(data, dtype=np.float64):
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


class TestForward:
    def test_relu(self):
        out = ops.relu(Tensor([-1.0, 0.0, 2.0]))
        assert out.data.tolist() == [0.0, 0.0, 2.0]

    def test_identity_linear(self):
        v = np.array([[1.5, -2.0, 3.0]])
        out = ops.linear(Tensor(v), Tensor(np.eye(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, v)

    def test_conv_1x1(self):
        img = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        out = ops.conv2d(img, Tensor(np.full((1, 1, 1, 1), 2.0)))
        np.testing.assert_array_equal(out.data[0, 0], [[2, 4], [6, 8]])

    def test_conv_matches_direct_loop(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 3, 7, 7))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros((2, 4, 4, 4))
        for n in range(2):
            for o in range(4):
                for i in range(4):
                    for j in range(4):
                        ref[n, o, i, j] = (xp[n, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[o]).sum() + b[o]
        np.testing.assert_allclose(out, ref, rtol=1e-12)

    def test_softmax_sums_to_one(self):
        p = ops.softmax(Tensor(np.random.default_rng(1).normal(size=(5, 8)))).data
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_max_pool(self):
        x = Tensor(np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4))
        np.testing.assert_array_equal(ops.max_pool2d(x).data[0, 0], [[5, 7], [13, 15]])

    def test_upsample_non_integer(self):
        x = Tensor(np.arange(4, dtype=np.float64).reshape(1, 1, 2, 2))
        out = ops.upsample_nearest(x, (3, 3)).data[0, 0]
        np.testing.assert_array_equal(out, [[0, 0, 1], [0, 0, 1], [2, 2, 3]])

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        x, w = rng.normal(size=(2, 3, 8, 8)).astype(np.float32), rng.normal(size=(5, 3, 3, 3)).astype(np.float32)
        a = ops.conv2d(Tensor(x), Tensor(w), padding=1).data
        b = ops.conv2d(Tensor(x), Tensor(w), padding=1).data
        assert a.tobytes() == b.tobytes()

    @pytest.mark.parametrize(
        "call, op",
        [
            (lambda: ops.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2)))), "linear"),
            (lambda: ops.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3)))), "conv2d"),
            (lambda: ops.add(Tensor(np.ones(3)), Tensor(np.ones(4))), "add"),
            (lambda: ops.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2)))], axis=1), "concat"),
            (lambda: ops.max_pool2d(Tensor(np.ones((1, 1, 3, 3)))), "max_pool2d"),
        ],
    )
    def test_shape_errors_name_the_op(self, call, op):
        with pytest.raises(ShapeError) as exc:
            call()
        assert exc.value.op == op
        assert op in str(exc.value)


class TestBackward:
    def test_sum(self):
        p = _leaf([1.0, 2.0])
        ops.sum_(p).backward()
        np.testing.assert_array_equal(p.grad, [1, 1])

    def test_square(self):
        p = _leaf(3.0)
        ops.mul(p, p).backward()
        assert p.grad == pytest.approx(6.0)

    def test_softmax_cross_entropy_uniform(self):
        z = _leaf(np.zeros((1, 4)))
        ops.sum_(ops.cross_entropy(z, [0])).backward()
        np.testing.assert_allclose(z.grad[0], [-0.75, 0.25, 0.25, 0.25], atol=1e-15)

    def test_backward_without_forward(self):
        with pytest.raises(GraphError):
            _leaf([1.0]).backward()

    def test_backward_needs_scalar(self):
        p = _leaf([1.0, 2.0])
        with pytest.raises(GraphError):
            ops.mul(p, 2.0).backward()

    def test_no_grad_records_nothing(self):
        p = _leaf([1.0, 2.0])
        with no_grad():
            out = ops.sum_(p)
        with pytest.raises(GraphError):
            out.backward()

    def test_linearity_of_backward(self):
        rng = np.random.default_rng(3)
        w = rng.normal(size=(4, 3))
        x = Tensor(rng.normal(size=(5, 4)))

        def grads(which):
            p = ParamSet({"teacher.w": Tensor(w.copy())})
            p.zero_grad()
            h = ops.linear(x, p["teacher.w"])
            la = ops.sum_(ops.mul(ops.relu(h), ops.relu(h)))
            lb = ops.sum_(ops.cross_entropy(h, [0, 1, 2, 0, 1]))
            loss = {"a": la, "b": lb, "ab": ops.add(la, lb)}[which]
            loss.backward()
            return p["teacher.w"].grad

        np.testing.assert_allclose(grads("ab"), grads("a") + grads("b"), rtol=1e-12)

    def test_unreachable_parameters_get_zero_grad(self):
        p = ParamSet({"teacher.w": Tensor(np.ones((2, 2))), "navigator.w": Tensor(np.ones((2, 2)))})
        p.zero_grad()
        ops.sum_(ops.linear(Tensor(np.ones((1, 2))), p["teacher.w"])).backward()
        assert np.all(p["navigator.w"].grad == 0)
        assert np.all(p["teacher.w"].grad != 0)


# each entry maps parameters named "teacher.*" to the op's output tensor
_rng = np.random.default_rng(7)
OP_GRAPHS = {
    "conv2d": (
        {"teacher.x": _rng.normal(size=(2, 3, 6, 6)), "teacher.w": _rng.normal(size=(4, 3, 3, 3)), "teacher.b": _rng.normal(size=4)},
        lambda p: ops.conv2d(p["teacher.x"], p["teacher.w"], p["teacher.b"], stride=2, padding=1),
    ),
    "linear": (
        {"teacher.x": _rng.normal(size=(3, 5)), "teacher.w": _rng.normal(size=(5, 4)), "teacher.b": _rng.normal(size=4)},
        lambda p: ops.linear(p["teacher.x"], p["teacher.w"], p["teacher.b"]),
    ),
    "relu": ({"teacher.x": _rng.normal(size=(10, 12))}, lambda p: ops.relu(p["teacher.x"])),
    "max_pool2d": ({"teacher.x": _rng.normal(size=(2, 3, 6, 6))}, lambda p: ops.max_pool2d(p["teacher.x"])),
    "softmax": ({"teacher.x": _rng.normal(size=(6, 5))}, lambda p: ops.softmax(p["teacher.x"])),
    "cross_entropy": ({"teacher.x": _rng.normal(size=(12, 9))}, lambda p: ops.cross_entropy(p["teacher.x"], np.arange(12) % 9)),
    "hinge": ({"teacher.x": _rng.normal(size=120)}, lambda p: ops.hinge(p["teacher.x"])),
    "concat_take": (
        {"teacher.x": _rng.normal(size=(4, 3)), "teacher.y": _rng.normal(size=(4, 5))},
        lambda p: ops.take(ops.concat([p["teacher.x"], p["teacher.y"]], axis=1), [3, 0, 3, 1]),
    ),
    "upsample_add": (
        {"teacher.x": _rng.normal(size=(2, 3, 7, 7)), "teacher.y": _rng.normal(size=(2, 3, 4, 4))},
        lambda p: ops.add(p["teacher.x"], ops.upsample_nearest(p["teacher.y"], (7, 7))),
    ),
    "transpose_reshape_gap": (
        {"teacher.x": _rng.normal(size=(2, 3, 4, 5))},
        lambda p: ops.reshape(ops.transpose(ops.global_avg_pool(p["teacher.x"]), (1, 0)), (6,)),
    ),
    "batch_norm": (
        {"teacher.x": _rng.normal(size=(4, 3, 5, 5)), "teacher.g": _rng.normal(size=3), "teacher.b": _rng.normal(size=3)},
        lambda p: ops.batch_norm(
            p["teacher.x"], p["teacher.g"], p["teacher.b"], np.zeros(3), np.ones(3), training=True, update_stats=False
        ),
    ),
    "mul_mean": ({"teacher.x": _rng.normal(size=(20, 6))}, lambda p: ops.mean(ops.mul(ops.mul(p["teacher.x"], p["teacher.x"]), 0.7))),
}


@pytest.mark.parametrize("name", sorted(OP_GRAPHS))
def test_op_gradients_match_finite_differences(name):
    arrays, build = OP_GRAPHS[name]
    params = ParamSet({k: Tensor(v) for k, v in arrays.items()})
    with no_grad():
        shape = build(params).shape
    # random cotangent so every output element carries its own weight
    cot = Tensor(np.random.default_rng(11).normal(size=shape))
    report = grad_check(lambda p: ops.sum_(ops.mul(build(p), cot)), params, epsilon=1e-5, n_coords=100, seed=1)
    assert report.n_checked + len(report.skipped) >= min(100, sum(a.size for a in arrays.values()))
    assert report.n_checked >= 0.9 * (report.n_checked + len(report.skipped))
    assert report.max_rel_error < 1e-4, report


class TestGradCheck:
    def test_linear_loss_is_exact(self):
        p = ParamSet({"teacher.w": Tensor(np.arange(6, dtype=np.float64))})
        report = grad_check(lambda q: ops.sum_(ops.mul(q["teacher.w"], 3.0)), p)
        assert report.max_rel_error < 1e-9

    def test_hinge_kink_is_skipped(self):
        p = ParamSet({"teacher.x": Tensor(np.array([1.0, 0.3, 2.0]))})
        report = grad_check(lambda q: ops.sum_(ops.hinge(q["teacher.x"])), p)
        assert ("teacher.x", 0) in report.skipped
        assert report.n_checked == 2
        assert report.max_rel_error < 1e-9

    def test_non_finite_names_coordinate(self):
        p = ParamSet({"teacher.x": Tensor(np.array([1.0, 2.0]))})

        def graph(q):
            x = q["teacher.x"]
            return ops.sum_(ops.mul(x, Tensor(np.array([np.inf, 1.0]))))

        with pytest.raises(NumericalError, match=r"teacher.x\[0\]"):
            grad_check(graph, p)

    def test_corrupted_gradient_is_caught(self):
        p = ParamSet({"teacher.x": Tensor(np.array([1.0, 2.0]))})
        report = grad_check(
            lambda q: ops.sum_(ops.mul(q["teacher.x"], q["teacher.x"])), p, grad_transform=lambda n, g: g * 1.5
        )
        assert report.max_rel_error > 0.1

    def test_runs_in_double_precision(self):
        p = ParamSet({"teacher.x": Tensor(np.array([1.0, 2.0], dtype=np.float32))})
        seen = []

        def graph(q):
            seen.append(q["teacher.x"].dtype)
            return ops.sum_(q["teacher.x"])

        grad_check(graph, p)
        assert set(seen) == {np.dtype(np.float64)}
        assert p["teacher.x"].dtype == np.float32


class TestSGD:
    def _one(self, p, g, v=None, **kw):
        params = ParamSet({"teacher.w": Tensor(np.array([p], dtype=np.float64))})
        params["teacher.w"].grad = np.array([g], dtype=np.float64)
        state = OptimState(**kw)
        if v is not None:
            state.velocity["teacher.w"] = np.array([v], dtype=np.float64)
        sgd_momentum_step(params, state)
        return params["teacher.w"].data[0], state.velocity["teacher.w"][0]

    def test_fixed_point(self):
        assert self._one(1.0, 0.0, lr=0.1, momentum=0.9, weight_decay=0.0) == (1.0, 0.0)

    def test_plain_step(self):
        p, _ = self._one(1.0, 1.0, lr=0.1, momentum=0.0, weight_decay=0.0)
        assert p == pytest.approx(0.9)

    def test_momentum_step(self):
        p, v = self._one(1.0, 1.0, v=1.0, lr=0.1, momentum=0.9, weight_decay=0.0)
        assert v == pytest.approx(1.9)
        assert p == pytest.approx(0.81)

    def test_lr_decay_after_boundary(self):
        state = OptimState(lr=0.1, decay_epoch=3)
        state.epoch = 2
        assert state.current_lr == pytest.approx(0.1)
        state.epoch = 3
        assert state.current_lr == pytest.approx(0.01)

    def test_missing_gradient(self):
        params = ParamSet({"teacher.w": Tensor(np.ones(2))})
        with pytest.raises(ValueError, match="teacher.w"):
            sgd_momentum_step(params, OptimState())

    def test_frozen_owner_untouched(self):
        params = ParamSet({"teacher.w": Tensor(np.ones(2)), "extractor.w": Tensor(np.ones(2))})
        for t in params.values():
            t.grad = np.ones(2)
        sgd_momentum_step(params, OptimState(lr=0.5), frozen=("extractor",))
        assert np.all(params["extractor.w"].data == 1)
        assert np.all(params["teacher.w"].data < 1)

    def test_positive_lr_required(self):
        with pytest.raises(ValueError):
            OptimState(lr=0.0)


class TestCheckpoint:
    def test_header_layout(self):
        blob = dumps({"teacher.w": np.array([[1.0, 2.0]], dtype=np.float32)})
        assert blob[:4] == b"NTSC"
        assert struct.unpack_from("<I", blob, 4)[0] == 1
        assert struct.unpack_from("<I", blob, 8)[0] == len("teacher.w")
        assert blob[12:21] == b"teacher.w"
        assert struct.unpack_from("<3I", blob, 21) == (2, 1, 2)
        assert np.frombuffer(blob[33:], dtype="<f4").tolist() == [1.0, 2.0]

    @settings(max_examples=50, deadline=None)
    @given(
        st.lists(
            st.tuples(st.lists(st.integers(1, 4), min_size=0, max_size=3), st.integers(0, 2**31 - 1)),
            min_size=1,
            max_size=4,
        )
    )
    def test_bit_exact_round_trip(self, specs):
        arrays = {}
        for i, (shape, seed) in enumerate(specs):
            raw = np.random.default_rng(seed).integers(0, 2**32, size=shape, dtype=np.uint64).astype(np.uint32)
            arrays[f"teacher.p{i}"] = raw.view(np.float32)
        back = loads(dumps(arrays))
        assert list(back) == list(arrays)
        for k in arrays:
            assert back[k].shape == arrays[k].shape
            assert back[k].tobytes() == arrays[k].tobytes()

    def test_paramset_round_trip(self, tmp_path):
        params = ParamSet(
            {"extractor.w": Tensor(np.random.default_rng(0).normal(size=(3, 2)).astype(np.float32))},
            {"extractor.bn.running_mean": np.arange(3, dtype=np.float32)},
        )
        save_checkpoint(tmp_path / "c.ntsc", params)
        back = load_checkpoint(tmp_path / "c.ntsc")
        assert back["extractor.w"].data.tobytes() == params["extractor.w"].data.tobytes()
        assert back.buffers["extractor.bn.running_mean"].tolist() == [0, 1, 2]

    def test_bad_magic(self):
        with pytest.raises(CheckpointError):
            loads(b"XXXX\x01\x00\x00\x00")

    def test_truncated(self):
        blob = dumps({"teacher.w": np.ones(4, dtype=np.float32)})
        with pytest.raises(CheckpointError):
            loads(blob[:-3])
