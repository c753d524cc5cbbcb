import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semiseg import autodiff as ad
from semiseg.autodiff import Tape, Tensor
from semiseg.errors import ContractError, DimensionError, LabelError

from oracles import (finite_difference, naive_conv2d, naive_matmul, relative_error, scalar_bce, scalar_ce,
                     scalar_dice)


def _gradcheck(build, arrays, h=1e-3, tol=1e-4):
    """Compare tape gradients of ``build(*tensors)`` with central differences, all in float64."""
    tensors = [Tensor(a.astype(np.float64), requires_grad=True) for a in arrays]
    with Tape():
        loss = build(*tensors)
    loss.backward()
    for t in tensors:
        for idx in np.ndindex(t.shape):
            num = finite_difference(lambda: build(*tensors).item(), t.data, idx, h)
            assert relative_error(float(t.grad[idx]), num) < tol, (idx, t.grad[idx], num)


class TestMatmul:
    def test_identity(self):
        out = ad.matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_row_times_column(self):
        out = ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        assert out.data.tolist() == [[11.0]]

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(5, 7)).astype(np.float32)
        b = rng.normal(size=(7, 3)).astype(np.float32)
        np.testing.assert_allclose(ad.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), atol=1e-6)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))

    def test_gradient(self):
        rng = np.random.default_rng(1)
        _gradcheck(lambda a, b: (ad.matmul(a, b) * ad.matmul(a, b)).sum(),
                   [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))])

    def test_batched_gradient(self):
        rng = np.random.default_rng(2)
        _gradcheck(lambda a, b: ad.sigmoid(a @ b).sum(), [rng.normal(size=(3, 4)), rng.normal(size=(2, 4, 5))])


class TestConv2d:
    def test_zero_kernel_gives_bias(self):
        x = Tensor(np.random.default_rng(0).random((2, 5, 6)))
        out = ad.conv2d(x, Tensor(np.zeros((3, 2, 3, 3))), Tensor([1.0, -2.0, 0.5]))
        for c, b in enumerate([1.0, -2.0, 0.5]):
            np.testing.assert_array_equal(out.data[c], np.full((5, 6), b, dtype=np.float32))

    def test_delta_kernel_is_identity(self):
        k = np.zeros((1, 1, 3, 3), np.float32)
        k[0, 0, 1, 1] = 1
        x = np.random.default_rng(1).random((1, 7, 7)).astype(np.float32)
        np.testing.assert_array_equal(ad.conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(1))).data, x)

    def test_matches_nested_loops(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(2, 8, 8)).astype(np.float32)
        k = rng.normal(size=(3, 2, 3, 3)).astype(np.float32)
        b = rng.normal(size=3).astype(np.float32)
        np.testing.assert_allclose(ad.conv2d(Tensor(x), Tensor(k), Tensor(b)).data, naive_conv2d(x, k, b), atol=1e-5)

    def test_batched_equals_per_image(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(3, 2, 6, 5)).astype(np.float32)
        k = Tensor(rng.normal(size=(4, 2, 3, 3)).astype(np.float32))
        b = Tensor(rng.normal(size=4).astype(np.float32))
        batched = ad.conv2d(Tensor(x), k, b).data
        for i in range(3):
            np.testing.assert_allclose(batched[i], ad.conv2d(Tensor(x[i]), k, b).data, atol=1e-6)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            ad.conv2d(Tensor(np.ones((3, 4, 4))), Tensor(np.ones((2, 2, 3, 3))), Tensor(np.zeros(2)))

    def test_gradient(self):
        rng = np.random.default_rng(4)
        _gradcheck(lambda x, k, b: (ad.conv2d(x, k, b) * ad.conv2d(x, k, b)).sum(),
                   [rng.normal(size=(2, 2, 4, 4)), rng.normal(size=(2, 2, 3, 3)), rng.normal(size=2)])


class TestSoftmax:
    def test_uniform_row(self):
        np.testing.assert_allclose(ad.softmax_rows(Tensor(np.zeros((1, 3)))).data, [[1 / 3] * 3], atol=1e-7)

    def test_large_logits_do_not_overflow(self):
        out = ad.softmax_rows(Tensor([[1000.0, 0.0]])).data
        assert np.isfinite(out).all()
        assert out[0, 0] == pytest.approx(1.0) and out[0, 1] == pytest.approx(0.0, abs=1e-12)

    def test_rows_sum_to_one(self):
        out = ad.softmax_rows(Tensor(np.random.default_rng(0).normal(size=(4, 5)).astype(np.float32))).data
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=8), st.floats(-100, 100))
    def test_shift_invariance(self, row, c):
        x = np.array([row])
        a = ad.softmax_rows(Tensor(x)).data
        b = ad.softmax_rows(Tensor(x + c)).data
        np.testing.assert_allclose(a, b, atol=1e-9)
        assert abs(a.sum() - 1) < 1e-6

    def test_requires_matrix(self):
        with pytest.raises(DimensionError):
            ad.softmax_rows(Tensor(np.zeros(3)))

    def test_gradient(self):
        rng = np.random.default_rng(5)
        w = rng.normal(size=(3, 4))
        _gradcheck(lambda x: (ad.softmax(x) * w).sum(), [rng.normal(size=(3, 4))])


class TestLosses:
    def test_correct_one_hot_gives_zero(self):
        probs = Tensor([[0.0, 1.0, 0.0]])
        assert ad.cross_entropy(probs, [1]).item() <= 1e-6

    def test_uniform_gives_log_n(self):
        assert ad.cross_entropy(Tensor(np.full((2, 4), 0.25)), [0, 3]).item() == pytest.approx(math.log(4), abs=1e-6)

    def test_label_out_of_range(self):
        with pytest.raises(LabelError):
            ad.cross_entropy(Tensor(np.full((1, 4), 0.25)), [4])

    def test_against_scalar_formulas(self):
        rng = np.random.default_rng(6)
        probs = ad.softmax_rows(Tensor(rng.normal(size=(5, 4)))).data
        targets = rng.integers(0, 4, size=5)
        assert ad.cross_entropy(Tensor(probs), targets).item() == pytest.approx(scalar_ce(probs, targets), abs=1e-5)
        logits = rng.normal(scale=3, size=(3, 16))
        masks = rng.random((3, 16)) < 0.4
        assert ad.bce_with_logits(Tensor(logits), masks).item() == pytest.approx(scalar_bce(logits, masks), abs=1e-5)
        assert ad.dice_loss(Tensor(logits), masks).item() == pytest.approx(scalar_dice(logits, masks), abs=1e-5)

    def test_perfect_masks_near_zero(self):
        masks = np.random.default_rng(7).random((2, 20)) < 0.5
        logits = np.where(masks, 30.0, -30.0)
        assert ad.bce_with_logits(Tensor(logits), masks).item() < 1e-6
        assert ad.dice_loss(Tensor(logits), masks).item() < 1e-6

    def test_losses_non_negative(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            logits = rng.normal(scale=4, size=(2, 9))
            masks = rng.random((2, 9)) < 0.5
            assert ad.bce_with_logits(Tensor(logits), masks).item() >= 0
            assert ad.dice_loss(Tensor(logits), masks).item() >= 0

    def test_gradients(self):
        rng = np.random.default_rng(9)
        masks = rng.random((2, 6)) < 0.5
        targets = rng.integers(0, 3, size=4)
        _gradcheck(lambda x: ad.bce_with_logits(x, masks) + ad.dice_loss(x, masks), [rng.normal(size=(2, 6))])
        _gradcheck(lambda x: ad.cross_entropy(ad.softmax(x), targets), [rng.normal(size=(4, 3))])


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4)), requires_grad=True)
        with Tape():
            loss = x.sum()
        loss.backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))

    def test_half_square_gives_x(self):
        x = Tensor(np.random.default_rng(1).normal(size=(3, 3)), requires_grad=True)
        with Tape():
            loss = (x * x).sum() * 0.5
        loss.backward()
        np.testing.assert_allclose(x.grad, x.data, rtol=1e-6)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape():
            y = x * 2.0
        with pytest.raises(ContractError):
            y.backward()

    def test_untaped_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = (x * 2.0).sum()
        with pytest.raises(ContractError):
            y.backward()

    def test_shared_subexpression_accumulates(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        with Tape():
            y = x * 3.0
            loss = (y + y * y).sum()
        loss.backward()
        np.testing.assert_allclose(x.grad, 3.0 + 18.0 * x.data)

    def test_tape_is_topological_and_visited_once(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        calls = []
        with Tape() as tape:
            loss = ad.relu(x @ x + 1.0).sum()
        for node in tape.nodes:
            original = node.backward
            node.backward = (lambda fn, n: lambda g: (calls.append(id(n)), fn(g))[1])(original, node)
        loss.backward()
        assert len(calls) == len(tape.nodes) == len(set(calls))
        produced = set()
        for node in tape.nodes:
            for inp in node.inputs:
                if isinstance(inp, Tensor) and inp._tape is tape:
                    assert id(inp) in produced
            produced.add(id(node.output))

    def test_no_grad_suspends_recording(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with Tape() as tape:
            with ad.no_grad():
                y = (x * 2.0).sum()
        assert not tape.nodes and not y.requires_grad

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(11)
            x = Tensor(rng.normal(size=(2, 3, 6, 6)).astype(np.float32), requires_grad=True)
            k = Tensor(rng.normal(size=(4, 3, 3, 3)).astype(np.float32), requires_grad=True)
            with Tape():
                loss = ad.softmax(ad.conv2d(x, k, Tensor(np.zeros(4, np.float32))).reshape(2, -1)).log().sum()
            loss.backward()
            return loss.data.tobytes(), x.grad.tobytes(), k.grad.tobytes()

        assert run() == run()

    def test_float32_preserved(self):
        x = Tensor(np.ones((2, 2), np.float32), requires_grad=True)
        with Tape():
            y = (ad.sigmoid(x * 2.0 + 1.0) / 3.0).mean()
        y.backward()
        assert y.dtype == np.float32 and x.grad.dtype == np.float32

    def test_outputs_finite(self):
        rng = np.random.default_rng(12)
        x = Tensor(rng.normal(scale=50, size=(4, 6)), requires_grad=True)
        with Tape():
            loss = ad.cross_entropy(ad.softmax(x), rng.integers(0, 6, 4)) + ad.bce_with_logits(x, x.data > 0)
        loss.backward()
        assert np.isfinite(loss.data) and np.isfinite(x.grad).all()


@pytest.mark.parametrize("op", ["relu", "sigmoid", "exp", "log", "div", "getitem", "transpose", "concat", "mean"])
def test_elementwise_and_shape_gradients(op):
    rng = np.random.default_rng(13)
    a = rng.uniform(0.5, 2.0, size=(3, 4)) * rng.choice([-1, 1], size=(3, 4))
    pos = np.abs(a)
    w = rng.normal(size=(3, 4))
    builds = {
        "relu": (lambda x: (ad.relu(x) * w).sum(), a),
        "sigmoid": (lambda x: (ad.sigmoid(x) * w).sum(), a),
        "exp": (lambda x: (ad.exp(x) * w).sum(), a),
        "log": (lambda x: (ad.log(x) * w).sum(), pos),
        "div": (lambda x: (1.0 / x * w).sum(), pos),
        "getitem": (lambda x: (x[np.array([0, 2, 2]), np.array([1, 3, 3])] * np.array([1.0, 2.0, 3.0])).sum(), a),
        "transpose": (lambda x: (x.transpose() @ Tensor(w)).sum() * 2.0, a),
        "concat": (lambda x: (ad.concat([x, x * 2.0], axis=1) * np.concatenate([w, w], 1)).sum(), a),
        "mean": (lambda x: (x.mean(axis=1) * np.arange(3.0)).sum() + x.mean(), a),
    }
    build, arr = builds[op]
    _gradcheck(build, [arr])
