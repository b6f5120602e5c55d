import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bodyfit import autodiff as ad
from bodyfit.errors import (
    ConfigurationError,
    ContractViolationError,
    DimensionError,
    NumericError,
)
from oracles import fd_gradient, min_over_set_enumerated, rel_err

rng = np.random.default_rng(0)


def tape_grad(f, x):
    """Analytic gradient of scalar f at x through the tape."""
    tape = ad.Tape()
    xt = tape.variable(x)
    y = f(xt)
    g = ad.backward(tape, y).get(xt.node_id)
    return np.zeros_like(x) if g is None else g


# --- forward values ---------------------------------------------------------


def test_add_componentwise():
    out = ad.apply_primitive("add", [np.array([1.0, 2.0]), np.array([3.0, 4.0])])
    assert np.array_equal(out.data, [4.0, 6.0])


def test_softmax_symmetry():
    out = ad.softmax(np.array([[0.0, 0.0]]), axis=1)
    assert np.allclose(out.data, [[0.5, 0.5]])


def test_min_over_index_set_matches_enumeration():
    vals = np.array([3.0, 1.5, 2.0])
    out = ad.min_over_index_set(vals, [0, 1, 2])
    exp_val, exp_idx = min_over_set_enumerated(vals, [0, 1, 2])
    assert out.data == exp_val == 1.5
    g = tape_grad(lambda x: ad.min_over_index_set(x, [0, 1, 2]), vals)
    expected = np.zeros(3)
    expected[exp_idx] = 1.0
    assert np.array_equal(g, expected)


def test_min_over_index_set_subset_and_ties():
    vals = np.array([0.5, 2.0, 0.5, 1.0])
    out = ad.min_over_index_set(vals, [2, 3])
    assert out.data == 0.5
    # tie across {0, 2}: gradient goes to the lowest index
    g = tape_grad(lambda x: ad.min_over_index_set(x, [2, 0]), vals)
    assert np.array_equal(g, [1.0, 0.0, 0.0, 0.0])


def test_dropout_all_ones_identity():
    x = rng.normal(size=(4, 5))
    out = ad.dropout(x, np.ones_like(x))
    assert np.array_equal(out.data, x)


def test_quat_identity_rotation():
    out = ad.unit_quat_to_rotmat(np.array([1.0, 0.0, 0.0, 0.0]))
    assert np.allclose(out.data, np.eye(3))


# --- backward ----------------------------------------------------------------


def test_backward_sum_is_ones():
    g = tape_grad(lambda x: x.sum(), np.zeros(3))
    assert np.array_equal(g, [1.0, 1.0, 1.0])


def test_backward_quadratic():
    g = tape_grad(lambda x: (x * x).sum(), np.array([1.0, 2.0]))
    assert np.array_equal(g, [2.0, 4.0])


def test_backward_requires_scalar_root():
    tape = ad.Tape()
    x = tape.variable(np.zeros(3))
    with pytest.raises(ContractViolationError):
        ad.backward(tape, x + 1.0)


def test_backward_deterministic():
    x = rng.normal(size=(6, 4))

    def run():
        tape = ad.Tape()
        xt = tape.variable(x)
        y = ad.relu(xt @ ad.constant(rng2) + 1.0)
        z = ad.softmax(y, axis=1)
        s = (z * z).sum()
        return ad.backward(tape, s)[xt.node_id]

    rng2 = np.random.default_rng(7).normal(size=(4, 4))
    g1, g2 = run(), run()
    assert g1.tobytes() == g2.tobytes()


# --- error contracts ---------------------------------------------------------


def test_unknown_primitive_is_configuration_error():
    with pytest.raises(ConfigurationError):
        ad.apply_primitive("definitely-not-a-primitive", [np.zeros(2)])


def test_shape_mismatch_names_primitive():
    with pytest.raises(DimensionError, match="matrix-multiply"):
        ad.apply_primitive("matrix-multiply", [np.zeros((2, 3)), np.zeros((2, 3))])
    with pytest.raises(DimensionError, match="add"):
        ad.apply_primitive("add", [np.zeros(3), np.zeros(4)])


def test_mixed_tapes_rejected():
    t1, t2 = ad.Tape(), ad.Tape()
    a = t1.variable(np.zeros(2))
    b = t2.variable(np.zeros(2))
    with pytest.raises(ContractViolationError):
        _ = a + b


def test_degenerate_quaternion_norm():
    with pytest.raises(NumericError):
        ad.quaternion_normalize(np.array([1e-12, 0.0, 0.0, 0.0]))


# --- gradients vs central finite differences ---------------------------------

def scalar_through(fn):
    """Wrap an ndarray->Tensor builder into scalar analytic/numeric pair."""

    def analytic(x):
        return tape_grad(lambda t: fn(t), x)

    def numeric(x):
        return fd_gradient(lambda a: float(fn(ad.Tensor(a)).data), x)

    return analytic, numeric


_W35 = rng.normal(size=(3, 5))
_W232 = rng.normal(size=(2, 3, 2))
_W43 = rng.normal(size=(4, 3))
_W333 = rng.normal(size=(3, 3, 3))

GRAD_CASES = {
    "add-broadcast": lambda t: (t + np.arange(3.0)).sum(),
    "mul": lambda t: (t * (np.arange(12.0).reshape(4, 3) + 0.5)).sum(),
    "matmul": lambda t: (t @ _W35).sum(),
    "matmul-batched": lambda t: (t.reshape(2, 2, 3) @ ad.constant(_W232)).sum(),
    "softmax": lambda t: (ad.softmax(t, axis=-1) * _W43).sum(),
    "relu": lambda t: ad.relu(t).sum(),
    "abs": lambda t: ad.absolute(t).sum(),
    "max-const": lambda t: ad.max_with_constant(t, 0.25).sum(),
    "mean": lambda t: t.mean(axes=(0,)).sum(),
    "gather": lambda t: ad.gather_rows(t, [2, 0, 2], axis=0).sum(),
    "concat": lambda t: ad.concatenate([t, t * 2.0], axis=1).sum(),
    "quat": lambda t: (
        ad.unit_quat_to_rotmat(ad.quaternion_normalize(t.reshape(3, 4))) * _W333
    ).sum(),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_gradient_matches_finite_differences(name):
    fn = GRAD_CASES[name]
    x = rng.normal(size=(4, 3)) + 0.05  # avoid |x|=0 and relu boundaries
    analytic, numeric = scalar_through(fn)
    assert rel_err(analytic(x), numeric(x)) <= 1e-4


def test_compose_tree_matches_manual_chain():
    parents = np.array([-1, 0, 1, 1])
    local = rng.normal(size=(2, 4, 4, 4))
    out = ad.compose_transform_tree(local, parents)
    manual = np.empty_like(local)
    manual[:, 0] = local[:, 0]
    manual[:, 1] = manual[:, 0] @ local[:, 1]
    manual[:, 2] = manual[:, 1] @ local[:, 2]
    manual[:, 3] = manual[:, 1] @ local[:, 3]
    assert np.allclose(out.data, manual)


def test_compose_tree_gradient():
    parents = np.array([-1, 0, 1, 0])
    w = rng.normal(size=(1, 4, 4, 4))

    def fn(t):
        return (ad.compose_transform_tree(t.reshape(1, 4, 4, 4), parents) * w).sum()

    analytic, numeric = scalar_through(fn)
    x = rng.normal(size=(1, 4, 4, 4))
    assert rel_err(analytic(x), numeric(x)) <= 1e-4


def test_transform_points_gradient():
    pts = rng.normal(size=(5, 3))

    def fn(t):
        return (ad.transform_points(t.reshape(5, 4, 4), pts) ** 0 * ad.transform_points(t.reshape(5, 4, 4), pts)).sum()

    x = rng.normal(size=(5, 4, 4))
    g = tape_grad(lambda t: ad.transform_points(t.reshape(5, 4, 4), pts).sum(), x)
    n = fd_gradient(
        lambda a: float(ad.transform_points(ad.Tensor(a.reshape(5, 4, 4)), pts).data.sum()),
        x,
    )
    assert rel_err(g, n) <= 1e-4


def test_gather_batched_gradient():
    idx = np.array([[0, 2], [1, 1]])

    def fn(t):
        return ad.gather_rows_batched(t.reshape(2, 3, 2), idx).sum()

    analytic, numeric = scalar_through(fn)
    x = rng.normal(size=(2, 3, 2))
    assert rel_err(analytic(x), numeric(x)) <= 1e-4
    # repeated indices accumulate
    g = analytic(x).reshape(2, 3, 2)
    assert np.array_equal(g[1, 1], [2.0, 2.0])


# --- grad_check --------------------------------------------------------------


def test_grad_check_l1_norm_passes():
    x = rng.normal(size=7)
    x[np.abs(x) < 0.1] = 0.5
    report = ad.grad_check(lambda t: ad.absolute(t).sum(), x)
    assert report.passed and not report.skipped


def test_grad_check_constant_function():
    report = ad.grad_check(lambda t: (t * 0.0).sum(), rng.normal(size=4))
    assert report.passed
    assert report.max_rel_err == 0.0


def test_grad_check_reports_tie_as_skipped():
    def skip_if(x):
        vals = x[[0, 1, 2]]
        if np.min(np.abs(vals - vals.min())) <= 1e-9 and np.sum(vals == vals.min()) > 1:
            return "non-differentiable point, skipped"
        return None

    report = ad.grad_check(
        lambda t: ad.min_over_index_set(t, [0, 1, 2]),
        np.array([1.0, 1.0, 3.0]),
        skip_if=skip_if,
    )
    assert report.skipped
    assert "non-differentiable" in report.note


def test_grad_check_detects_wrong_gradient():
    # relu's subgradient convention at 0 disagrees with an offset point moved
    # across the kink; emulate a broken gradient by comparing |x| against x.
    report = ad.grad_check(
        lambda t: (ad.absolute(t) - t - t).sum(), np.full(3, 2.0), tol=1e-12
    )
    # d/dx(|x| - 2x) = -1 at x>0; finite differences agree, so this passes...
    assert report.passed
    # ...but a genuinely non-differentiable point fails without skip_if
    report = ad.grad_check(lambda t: ad.absolute(t).sum(), np.zeros(3), step=1e-3)
    assert not report.passed


# --- property tests -----------------------------------------------------------


@settings(max_examples=30, deadline=None)
@given(
    st.integers(min_value=1, max_value=4),
    st.integers(min_value=1, max_value=4),
    st.integers(min_value=0, max_value=2**31 - 1),
)
def test_property_elementwise_grads(n, m, seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(n, m)) + 0.05
    w = r.normal(size=(n, m))

    def fn(t):
        return (ad.relu(t * w) + ad.absolute(t)).sum()

    g = tape_grad(fn, x)
    nu = fd_gradient(lambda a: float(fn(ad.Tensor(a)).data), x)
    assert rel_err(g, nu) <= 1e-4


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_property_softmax_rows_sum_to_one(seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(3, 5)) * 4
    s = ad.softmax(x, axis=1)
    assert np.allclose(s.data.sum(axis=1), 1.0, atol=1e-9)
