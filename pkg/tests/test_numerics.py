import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from retvqa import numerics as nx
from retvqa.numerics import Tensor


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


@pytest.fixture(autouse=True)
def float64_mode():
    with nx.default_dtype(np.float64):
        yield


# -- matmul ------------------------------------------------------------------

def test_matmul_identity():
    out = nx.matmul(t64(np.eye(2)), t64([[1, 2], [3, 4]]))
    assert np.array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_selector_row():
    out = nx.matmul(t64([[1, 0], [0, 0]]), t64([[5], [7]]))
    assert np.array_equal(out.data, [[5], [0]])


def test_matmul_grad_is_ones_times_bT():
    rng = np.random.default_rng(0)
    A, B = t64(rng.normal(size=(3, 4))), t64(rng.normal(size=(4, 2)))
    nx.matmul(A, B).sum().backward()
    assert np.allclose(A.grad, np.ones((3, 2)) @ B.data.T)
    numeric = nx.numeric_grad(lambda: nx.matmul(A, B).sum(), A)
    assert nx.relative_error(A.grad, numeric) < 1e-4


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(nx.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        nx.matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))


def test_batched_matmul_gradcheck():
    rng = np.random.default_rng(1)
    A = t64(rng.normal(size=(2, 3, 4)))
    B = t64(rng.normal(size=(2, 4, 5)))
    W = t64(rng.normal(size=(4, 5)))
    assert nx.gradcheck(lambda: (nx.matmul(A, B) * nx.matmul(A, W)).sum(), [A, B, W]) < 1e-4


# -- softmax -----------------------------------------------------------------

def test_softmax_symmetric():
    assert np.allclose(nx.softmax(t64([0.0, 0.0])).data, [0.5, 0.5])


def test_softmax_no_overflow():
    out = nx.softmax(t64([1000.0, 1000.0])).data
    assert np.all(np.isfinite(out)) and np.allclose(out, [0.5, 0.5])


def test_softmax_log_values():
    # e^ln1 = 1, e^ln3 = 3 -> 1/4, 3/4
    assert np.allclose(nx.softmax(t64([math.log(1), math.log(3)])).data, [0.25, 0.75])


def test_softmax_mask_gives_exact_zero():
    x = t64([[1.0, 2.0, 3.0]])
    out = nx.softmax(x, mask=np.array([[True, False, True]])).data
    assert out[0, 1] == 0.0
    assert abs(out.sum() - 1) < 1e-12


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8), st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(row, shift):
    x = np.array(row)
    a = nx.softmax(t64(x)).data
    b = nx.softmax(t64(x + shift)).data
    assert abs(a.sum() - 1) < 1e-6
    assert np.abs(a - b).max() < 1e-6


# -- layer norm --------------------------------------------------------------

def test_layer_norm_constant_row_is_zero():
    out = nx.layer_norm(t64([[2.0, 2.0, 2.0]]), t64(np.ones(3)), t64(np.zeros(3)))
    assert np.array_equal(out.data, np.zeros((1, 3)))


def test_layer_norm_population_variance():
    # mean 2, population var 1 -> [-1, 1] (up to eps)
    out = nx.layer_norm(t64([[1.0, 3.0]]), t64(np.ones(2)), t64(np.zeros(2)))
    assert np.allclose(out.data, [[-1, 1]], atol=1e-5)


def test_layer_norm_gradcheck():
    rng = np.random.default_rng(2)
    x, g, b = t64(rng.normal(size=(3, 5))), t64(rng.normal(size=5)), t64(rng.normal(size=5))
    w = rng.normal(size=(3, 5))
    assert nx.gradcheck(lambda: (nx.layer_norm(x, g, b) * w).sum(), [x, g, b]) < 1e-4


def test_layer_norm_rejects_bad_affine():
    with pytest.raises(nx.DimensionError):
        nx.layer_norm(t64(np.ones((2, 3))), t64(np.ones(2)), t64(np.zeros(3)))


# -- elementwise -------------------------------------------------------------

def test_sigmoid_zero():
    assert nx.elementwise("sigmoid", t64(0.0)).data == 0.5


def test_relu_values():
    assert nx.elementwise("relu", t64(-3.0)).data == 0
    assert nx.elementwise("relu", t64(3.0)).data == 3


@pytest.mark.parametrize("x0", [-2.0, -0.1, 0.0, 0.1, 2.0])
def test_gelu_gradcheck(x0):
    x = t64([x0])
    assert nx.gradcheck(lambda: nx.gelu(x).sum(), [x]) < 1e-4


def test_add_broadcast_leading_dims_and_grad():
    rng = np.random.default_rng(3)
    x, b = t64(rng.normal(size=(2, 3, 4))), t64(rng.normal(size=4))
    w = rng.normal(size=(2, 3, 4))
    assert nx.gradcheck(lambda: (nx.elementwise("add", x, b) * w).sum(), [x, b]) < 1e-4
    y = t64(rng.normal(size=(1, 3, 4)))
    assert nx.gradcheck(lambda: (nx.elementwise("mul", x, y) * w).sum(), [x, y]) < 1e-4


def test_broadcast_beyond_leading_dims_rejected():
    with pytest.raises(nx.DimensionError):
        nx.add(t64(np.ones((2, 3, 4))), t64(np.ones((2, 1, 4))))
    with pytest.raises(nx.DimensionError):
        nx.mul(t64(np.ones((2, 3))), t64(np.ones((3, 2))))


# -- losses ------------------------------------------------------------------

def test_cross_entropy_uniform_is_log_v():
    loss = nx.cross_entropy_logits(t64(np.zeros((1, 4))), [2])
    assert abs(loss.item() - math.log(4)) < 1e-12


def test_cross_entropy_confident_is_zero():
    logits = np.zeros((1, 4))
    logits[0, 1] = 20.0
    assert nx.cross_entropy_logits(t64(logits), [1]).item() < 1e-6


def test_cross_entropy_all_ignored():
    logits = t64(np.random.default_rng(0).normal(size=(3, 5)))
    loss = nx.cross_entropy_logits(logits, [0, 0, 0], ignore_id=0)
    assert loss.item() == 0.0
    loss.backward()
    assert np.array_equal(logits.grad, np.zeros((3, 5)))


def test_cross_entropy_out_of_range():
    with pytest.raises(IndexError):
        nx.cross_entropy_logits(t64(np.zeros((2, 4))), [1, 4])


def test_cross_entropy_gradcheck_with_ignore():
    rng = np.random.default_rng(4)
    logits = t64(rng.normal(size=(2, 3, 6)))
    targets = np.array([[1, 0, 5], [0, 2, 3]])
    assert nx.gradcheck(lambda: nx.cross_entropy_logits(logits, targets, ignore_id=0),
                        [logits]) < 1e-4


def test_bce_values():
    assert abs(nx.bce(t64(0.5), 1).item() - math.log(2)) < 1e-12
    assert nx.bce(t64(1 - 1e-7), 1).item() < 1e-6
    assert abs(nx.bce(t64(0.9), 0).item() - 2.302585) < 1e-6


def test_bce_gradcheck():
    p = t64([0.2, 0.7, 0.45])
    assert nx.gradcheck(lambda: nx.bce(p, [1, 0, 1]), [p]) < 1e-4


# -- backward ----------------------------------------------------------------

def test_backward_sum_gives_ones():
    p = t64(np.arange(6.0).reshape(2, 3))
    p.sum().backward()
    assert np.array_equal(p.grad, np.ones((2, 3)))


def test_backward_disconnected_parameter_zero():
    p, q = t64(np.ones(3)), t64(np.ones(3))
    p.zero_grad()
    q.zero_grad()
    (q * 2.0).sum().backward()
    assert np.array_equal(p.grad, np.zeros(3))


def test_backward_accumulates():
    p = t64(np.ones(2))
    p.sum().backward()
    p.sum().backward()
    assert np.array_equal(p.grad, [2.0, 2.0])


def test_backward_non_scalar_rejected():
    with pytest.raises(nx.ContractError):
        (t64(np.ones(2)) * 2.0).backward()


def test_attention_gradcheck_with_mask():
    rng = np.random.default_rng(5)
    q, k, v = (t64(rng.normal(size=(2, 2, 3, 4))) for _ in range(3))
    k5 = t64(rng.normal(size=(2, 2, 5, 4)))
    v5 = t64(rng.normal(size=(2, 2, 5, 4)))
    mask = np.array([[True, True, False, True, False], [True, True, True, True, True]])
    mask = mask[:, None, None, :]
    w = rng.normal(size=(2, 2, 3, 4))

    def f():
        out, _ = nx.scaled_dot_attention(q, k5, v5, mask)
        return (out * w).sum()

    assert nx.gradcheck(f, [q, k5, v5]) < 1e-4
    _, weights = nx.scaled_dot_attention(q, k5, v5, mask)
    assert np.all(weights[0, :, :, 2] == 0.0)


def test_shape_ops_gradcheck():
    rng = np.random.default_rng(6)
    x = t64(rng.normal(size=(2, 3, 4)))
    y = t64(rng.normal(size=(2, 2, 4)))
    E = t64(rng.normal(size=(7, 4)))
    w = rng.normal(size=(2, 4, 6))

    def f():
        z = nx.concat([x, y, nx.embedding(E, [[1, 3], [3, 6]])], axis=1)  # (2, 7, 4)
        z = z.transpose(0, 2, 1)[:, :, 1:]  # (2, 4, 6)
        z = nx.tanh(z.reshape(2, 24).reshape(2, 4, 6))
        return (z * w).mean() + nx.sigmoid(x[:, 0]).sum() + nx.log_softmax(y, -1)[1].sum()

    assert nx.gradcheck(f, [x, y, E]) < 1e-4


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_random_composite_gradcheck(seed):
    rng = np.random.default_rng(seed)
    m, k, n = rng.integers(1, 4, size=3)
    A = t64(rng.normal(size=(m, k)))
    B = t64(rng.normal(size=(k, n)))
    g, b = t64(rng.normal(size=n)), t64(rng.normal(size=n))
    w = rng.normal(size=(m, n))

    def f():
        # over two features layer norm outputs ±gamma whatever the input, leaving
        # gradients at the eps scale where finite differences are pure noise
        h = nx.layer_norm(nx.gelu(nx.matmul(A, B)), g, b) if n > 2 else nx.gelu(nx.matmul(A, B))
        return (nx.softmax(h * w, axis=-1) * w).sum() + nx.relu(h + 0.3).sum()

    # a saturated gelu leaves nothing but round-off to compare against
    assume(max(np.abs(nx.numeric_grad(f, t)).max() for t in (A, B)) > 1e-6)
    assert nx.gradcheck(f, [A, B, g, b]) < 1e-4


# -- adam / schedule ---------------------------------------------------------

def test_adam_zero_gradient_leaves_params():
    p = t64(np.array([1.0, -2.0]))
    opt = nx.Adam({"p": p}, lr=0.1)
    opt.zero_grad()
    opt.step()
    assert np.array_equal(p.data, [1.0, -2.0])
    assert opt.state.step == 1


def test_adam_first_step_magnitude_is_lr():
    # step 1: m̂ = g, v̂ = g², update = lr * g / (|g| + eps)
    p = t64(np.zeros(3))
    opt = nx.Adam({"p": p}, lr=0.01)
    p.grad = np.array([0.5, -3.0, 2.0])
    opt.step()
    expected = -0.01 * np.sign([0.5, -3.0, 2.0]) * np.abs([0.5, -3.0, 2.0]) / (
        np.abs([0.5, -3.0, 2.0]) + 1e-8)
    assert np.allclose(p.data, expected, rtol=0, atol=1e-12)
    assert p.grad is None


def test_adam_missing_grad():
    opt = nx.Adam({"p": t64(np.zeros(2))})
    with pytest.raises(nx.ContractError):
        opt.step()


def test_adam_state_v_nonnegative_and_functional_form():
    p = t64(np.ones(2))
    state = nx.AdamState()
    for i in range(3):
        p.grad = np.array([-1.0, 2.0]) * (i + 1)
        nx.adam_step({"p": p}, state, lr=0.1)
    assert state.step == 3
    assert np.all(state.v["p"] >= 0)


def test_adam_determinism():
    def run():
        rng = np.random.default_rng(7)
        W = t64(rng.normal(size=(3, 3)))
        X = rng.normal(size=(5, 3))
        opt = nx.Adam({"W": W}, lr=0.05)
        losses = []
        for _ in range(5):
            opt.zero_grad()
            loss = (nx.tanh(nx.matmul(Tensor(X), W)) * X[:, :3]).sum()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        return W.data.copy(), losses

    (w1, l1), (w2, l2) = run(), run()
    assert w1.tobytes() == w2.tobytes()
    assert l1 == l2


def test_warmup_schedule():
    assert nx.warmup_linear_lr(0, 100, 1e-3) == 0.0
    assert nx.warmup_linear_lr(10, 100, 1e-3) == 1e-3
    assert nx.warmup_linear_lr(3, 30, 5e-5) == 5e-5
    assert nx.warmup_linear_lr(100, 100, 1e-3) == 0.0
    assert nx.warmup_linear_lr(101, 100, 1e-3) == 0.0
    assert nx.warmup_linear_lr(55, 100, 1.0) == pytest.approx(0.5)


# -- checkpoint --------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    arrays = {"a.weight": rng.normal(size=(3, 4)).astype(np.float32),
              "b": rng.normal(size=(5,)).astype(np.float32),
              "scalar": np.array(1.5, dtype=np.float32)}
    path = tmp_path / "m.rqva"
    nx.save_checkpoint(path, arrays)
    back = nx.load_checkpoint(path)
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].tobytes() == arrays[k].tobytes()
    assert path.read_bytes()[:5] == b"RQVA1"


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "m.rqva"
    nx.save_checkpoint(path, {"w": np.ones((4, 4), dtype=np.float32)})
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(nx.CheckpointFormatError, match="offset"):
        nx.load_checkpoint(path)
