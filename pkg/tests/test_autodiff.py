import numpy as np
import pytest

from steam import autodiff as ad
from steam.autodiff import FlopCounter, Tensor, build_tape, no_grad
from steam.errors import DimensionError, EmptyNeighborhoodError
from steam.verify import gradcheck, primitive_cases


def test_matmul_examples():
    a = Tensor([[1.0, 2], [3, 4]])
    np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(2)), a).data, a.data)
    out = ad.matmul(Tensor([[1.0, 0], [0, 0]]), Tensor([[5.0, 6], [7, 8]]))
    np.testing.assert_array_equal(out.data, [[5, 6], [0, 0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_grad_matches_finite_differences(nprng):
    report = gradcheck(lambda a, b: ad.sum_(ad.matmul(a, b)), [nprng.normal(size=(3, 4)), nprng.normal(size=(4, 2))])
    assert report.max_rel_error < 1e-6


def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0, 0])).data, [1 / 3] * 3, atol=1e-15)
    np.testing.assert_allclose(ad.softmax(Tensor([2.0, 3])).data, [0.26894, 0.73106], atol=1e-5)
    for x in (-50.0, 0.0, 700.0):
        np.testing.assert_allclose(ad.softmax(Tensor([x, x + 1.5])).data,
                                   ad.softmax(Tensor([0.0, 1.5])).data, atol=1e-15)


def test_softmax_rows_stochastic(nprng):
    out = ad.softmax(Tensor(nprng.normal(size=(6, 9)) * 20), axis=1).data
    assert np.abs(out.sum(axis=1) - 1).max() < 1e-9
    assert ((out >= 0) & (out <= 1)).all()


def test_softmax_fully_masked_row_raises():
    mask = np.array([[True, False], [False, False]])
    with pytest.raises(EmptyNeighborhoodError, match="empty neighborhood"):
        ad.softmax(Tensor(np.zeros((2, 2))), axis=1, mask=mask)


def test_masked_entries_are_exact_zero():
    mask = np.array([[True, False, True]])
    out = ad.softmax(Tensor([[1.0, 5.0, 2.0]]), axis=1, mask=mask).data
    assert out[0, 1] == 0.0
    np.testing.assert_allclose(out[0, [0, 2]], ad.softmax(Tensor([1.0, 2.0])).data, atol=1e-15)


def test_activations_at_zero():
    assert ad.sigmoid(Tensor([0.0])).data[0] == 0.5
    assert ad.tanh(Tensor([0.0])).data[0] == 0.0
    np.testing.assert_array_equal(ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_sigmoid_range_and_grad(nprng):
    s = ad.sigmoid(Tensor([-800.0, -40.0, -1.0, 3.0, 40.0, 800.0])).data
    assert ((s > 0) & (s < 1)).all()
    report = gradcheck(lambda x: ad.sum_(ad.sigmoid(x)), [nprng.normal(size=7) * 3])
    assert report.max_rel_error < 1e-6


def _naive_conv(x, w, stride, pad):
    cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.zeros((cin, h + 2 * pad, wd + 2 * pad))
    xp[:, pad:pad + h, pad:pad + wd] = x
    ho, wo = (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1
    out = np.zeros((cout, ho, wo))
    for o in range(cout):
        for i in range(ho):
            for j in range(wo):
                for c in range(cin):
                    for u in range(k):
                        for v in range(k):
                            out[o, i, j] += xp[c, i * stride + u, j * stride + v] * w[o, c, u, v]
    return out


def test_conv2d_examples():
    out = ad.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.full((1, 1, 1, 1), 2.0)))
    np.testing.assert_array_equal(out.data, np.full((1, 3, 3), 2.0))
    x = np.arange(25.0).reshape(1, 5, 5)
    delta = np.zeros((1, 1, 3, 3))
    delta[0, 0, 1, 1] = 1
    np.testing.assert_array_equal(ad.conv2d(Tensor(x), Tensor(delta), pad=1).data, x)


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (1, 1, 3), (2, 1, 4), (2, 0, 2)])
def test_conv2d_matches_naive_loops(nprng, stride, pad, k):
    x = nprng.normal(size=(2, 8, 8))
    w = nprng.normal(size=(3, 2, k, k))
    np.testing.assert_allclose(ad.conv2d(Tensor(x), Tensor(w), stride=stride, pad=pad).data,
                               _naive_conv(x, w, stride, pad), atol=1e-10)


def test_conv2d_non_integral_output_raises():
    with pytest.raises(DimensionError, match="not integral"):
        ad.conv2d(Tensor(np.ones((1, 28, 28))), Tensor(np.ones((1, 1, 3, 3))), stride=2, pad=1)


def test_mean_and_broadcast():
    assert ad.mean(Tensor([1.0, 2, 3, 4])).item() == 2.5
    scores = Tensor(np.array([1.0, 2.0, 3.0]).reshape(3, 1, 1))
    out = (scores * Tensor(np.ones((3, 4, 5)))).data
    for c in range(3):
        assert (out[c] == c + 1).all()
    with pytest.raises(DimensionError, match="broadcast"):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))


def test_mean_gradient_is_uniform():
    x = Tensor(np.ones((3, 4)), requires_grad=True)
    ad.mean(x).backward()
    np.testing.assert_array_equal(x.grad, np.full((3, 4), 1 / 12))


def test_element_count_preserved():
    x = Tensor(np.arange(24.0).reshape(2, 3, 4))
    assert ad.reshape(x, (4, 6)).size == x.size == (x + x).size == (x * x).size


def test_chain_rule_closed_form():
    # f(x) = sum(exp(2x) * x) -> df/dx = exp(2x) * (2x + 1)
    xs = np.array([-0.7, 0.1, 1.3])
    x = Tensor(xs, requires_grad=True)
    ad.sum_(ad.exp(x * 2.0) * x).backward()
    np.testing.assert_allclose(x.grad, np.exp(2 * xs) * (2 * xs + 1), rtol=1e-14)


def test_gradient_accumulates_over_shared_inputs():
    x = Tensor([3.0], requires_grad=True)
    y = x * x + x  # x reused three times
    ad.sum_(y).backward()
    assert x.grad[0] == 7.0


def test_tape_topological_and_unique():
    x = Tensor(np.ones(3), requires_grad=True)
    a = ad.exp(x)
    b = a * a
    c = ad.sum_(b + a)
    tape = build_tape(c)
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    assert len(pos) == len(tape.nodes)
    for node in tape.nodes:
        for p in node._parents:
            assert pos[id(p)] < pos[id(node)]


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(DimensionError):
        ad.backward(x * 2.0)


def test_no_grad_skips_recording():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = x * 3.0
    assert not y.requires_grad and y._parents == ()


def test_tensor_rejects_zero_dimension():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((0, 3)))


@pytest.mark.parametrize("seed", range(20))
def test_every_primitive_gradcheck_across_seeds(seed):
    for name, (fn, inputs) in primitive_cases(np.random.default_rng(seed)).items():
        report = gradcheck(fn, inputs)
        assert report.passed, f"{name}: {report}"


def test_flop_counter_conventions():
    counter = FlopCounter()
    with counter.active():
        a = Tensor(np.ones((2, 3)))
        ad.matmul(a, Tensor(np.ones((3, 4))))  # 2*3*4 MACs
        ad.exp(a)
        ad.softmax(a, axis=1)
        ad.mean(a)
        ad.sum_(a, axis=1)
        ad.relu(a)
    assert counter.by_op == {"matmul": 48, "exp": 24, "softmax": 30, "mean": 6, "sum": 4, "relu": 6}
    assert counter.total == 118


def test_block_mean_inverts_repeat(nprng):
    s = nprng.normal(size=(2, 7, 7))
    for rh, rw in ((1, 1), (3, 3), (8, 8), (2, 5)):
        np.testing.assert_array_equal(ad.block_mean(ad.repeat_blocks(s, rh, rw), rh, rw).data, s)


def test_block_mean_values(nprng):
    x = nprng.normal(size=(3, 6, 9))
    ref = x.reshape(3, 2, 3, 3, 3).mean(axis=(2, 4))
    np.testing.assert_allclose(ad.block_mean(x, 3, 3).data, ref, atol=1e-15)
    with pytest.raises(DimensionError):
        ad.block_mean(x, 4, 3)
