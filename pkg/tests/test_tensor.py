import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from patchscope import tensor as T
from patchscope.errors import ConfigError, NumericalError

from gradcheck import CASES, check, run_cases
from oracles import conv2d_loops


@pytest.mark.parametrize("name", sorted(CASES))
def test_op_gradients_match_central_differences(name):
    for i in range(8):
        rng = np.random.default_rng([99, i, len(name)])
        fn, arrays = CASES[name](rng)
        assert check(fn, arrays, rng) < 1e-4, name


def test_gradcheck_case_count_is_at_least_100():
    assert sum(1 for _ in run_cases(7)) >= 100


@given(
    k=st.sampled_from([1, 3]),
    s=st.sampled_from([1, 2]),
    c=st.integers(1, 4),
    o=st.integers(1, 4),
    b=st.integers(1, 3),
    extra=st.integers(0, 5),
    same=st.booleans(),
    seed=st.integers(0, 2**16),
)
def test_conv2d_matches_loop_oracle(k, s, c, o, b, extra, same, seed):
    rng = np.random.default_rng(seed)
    pad = "same-zero" if same and k == 3 else "valid"
    spec = T.ConvSpec(c, o, k, s, pad)
    h = k + extra
    x = rng.standard_normal((b, c, h, h + 1))
    w = rng.standard_normal(spec.weight_shape)
    bias = rng.standard_normal(o)
    with T.precision("float64"):
        got = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(bias), spec).data
    want = conv2d_loops(x, w, bias, s, spec.pad)
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_conv_output_shape_and_validation():
    spec = T.ConvSpec(3, 4, 3, 2)
    assert spec.output_hw(9, 9) == (4, 4)
    assert spec.n_weights == 4 * 3 * 9
    with pytest.raises(ConfigError):
        T.ConvSpec(3, 4, 2)
    with pytest.raises(ConfigError):
        T.conv2d(T.Tensor(np.zeros((1, 2, 5, 5))), T.Tensor(np.zeros(spec.weight_shape)), None, spec)


def test_conv_single_matches_batched(f64, rng):
    spec = T.ConvSpec(2, 3, 3)
    x = rng.standard_normal((2, 6, 6))
    w = T.Tensor(rng.standard_normal(spec.weight_shape))
    single = T.conv2d_single(T.Tensor(x), w, None, spec).data
    batched = T.conv2d(T.Tensor(x[None]), w, None, spec).data[0]
    np.testing.assert_array_equal(single, batched)


def test_forward_bitwise_stable_across_thread_counts(f64, rng):
    spec = T.ConvSpec(3, 5, 3, 2)
    x = T.Tensor(rng.standard_normal((7, 3, 11, 11)))
    w = T.Tensor(rng.standard_normal(spec.weight_shape))
    outs = []
    for n in (1, 2, 3):
        with T.num_threads(n):
            outs.append(T.conv2d(x, w, None, spec).data.copy())
    assert all(np.array_equal(outs[0], o) for o in outs[1:])


def test_batch_norm_running_stats_update(f64):
    x = np.arange(8.0).reshape(2, 1, 2, 2)
    rm, rv = np.zeros(1), np.ones(1)
    T.batch_norm(T.Tensor(x), T.Tensor(np.ones(1)), T.Tensor(np.zeros(1)), rm, rv, training=True)
    np.testing.assert_allclose(rm, [0.1 * 3.5])
    np.testing.assert_allclose(rv, [0.9 + 0.1 * np.var(x, ddof=1)])


def test_batch_norm_train_output_is_standardised(f64, rng):
    x = T.Tensor(rng.standard_normal((4, 3, 5, 5)) * 3 + 2)
    y = T.batch_norm(x, T.Tensor(np.ones(3)), T.Tensor(np.zeros(3)), np.zeros(3), np.ones(3), True).data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-3)


def test_backward_requires_scalar_and_accumulates(f64):
    a = T.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with pytest.raises(ConfigError):
        T.mul(a, a).backward()
    T.sum_all(T.mul(a, a)).backward()
    T.sum_all(a).backward()
    np.testing.assert_allclose(a.grad, [3.0, 5.0])


def test_no_grad_records_nothing(f64):
    a = T.Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        out = T.sum_all(T.mul(a, a))
    assert out._parents == ()


@pytest.mark.filterwarnings("ignore:invalid value encountered:RuntimeWarning")
def test_non_finite_values_raise(f64):
    with pytest.raises(NumericalError):
        T.mul(T.Tensor(np.array([np.inf])), T.Tensor(np.array([0.0])))


def test_bce_stable_at_large_logits(f64):
    z = T.Tensor(np.array([20.0, -800.0, 800.0]), requires_grad=True)
    loss = T.bce_with_logits(z, [1, 0, 1])
    assert np.isfinite(loss.item())
    loss.backward()
    assert np.all(np.isfinite(z.grad))


def test_precision_switch_changes_dtype():
    with T.precision("float32"):
        assert T.Tensor([1.0]).data.dtype == np.float32
    with T.precision("float64"):
        assert T.Tensor([1.0]).data.dtype == np.float64
    with pytest.raises(ConfigError):
        T.set_precision("float16")


def test_threads_from_env(monkeypatch):
    monkeypatch.setenv("PATCHSCOPE_THREADS", "3")
    assert T.threads_from_env() == 3
    monkeypatch.setenv("PATCHSCOPE_THREADS", "x")
    with pytest.raises(ConfigError):
        T.threads_from_env()
