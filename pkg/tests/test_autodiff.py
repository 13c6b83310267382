import numpy as np
import pytest
from conftest import check_gradients, param

from led.autodiff import (
    Adam,
    Rng,
    Tape,
    Tensor,
    backward,
    clip,
    concat,
    elementwise,
    matmul,
    no_tape,
    reduce,
)
from led.errors import ContractError, DimensionError, DomainError
from led.vae import build_led_vae, elbo_led

OP_TOL = 1e-4


@pytest.mark.parametrize(
    "op, low, high",
    [
        ("exp", -2, 2),
        ("log", 0.2, 3),
        ("tanh", -2, 2),
        ("sigmoid", -3, 3),
        ("relu", -2, 2),
        ("elu", -2, 2),
        ("neg", -2, 2),
        ("softplus", -3, 3),
        ("square", -2, 2),
        ("ndtr", -2, 2),
        ("ndtri", 0.05, 0.95),
    ],
)
def test_unary_gradients(gen, op, low, high):
    x = param(gen, 4, 3, low=low, high=high)
    if op in ("relu", "elu"):
        # keep finite differences away from the kink
        x.data[np.abs(x.data) < 1e-3] = 0.5
    w = gen.standard_normal((4, 3))
    check_gradients(lambda: (elementwise(op, x) * w).sum(), [x], OP_TOL)


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
@pytest.mark.parametrize("shape_b", [(4, 3), (3,), (1, 3), (4, 1), ()])
def test_binary_gradients_with_broadcasting(gen, op, shape_b):
    a = param(gen, 4, 3)
    b = param(gen, *shape_b, low=0.5, high=2.0)
    w = gen.standard_normal((4, 3))
    check_gradients(lambda: (elementwise(op, a, b) * w).sum(), [a, b], OP_TOL)


def test_operator_overloads_match_named_ops(gen):
    a, b = param(gen, 3, 2), param(gen, 3, 2, low=0.5, high=1.5)
    np.testing.assert_array_equal((a + b).data, elementwise("add", a, b).data)
    np.testing.assert_array_equal((2.0 - a).data, 2.0 - a.data)
    np.testing.assert_array_equal((1.0 / b).data, 1.0 / b.data)
    np.testing.assert_array_equal((-a).data, -a.data)


def test_matmul_gradient(gen):
    a, b = param(gen, 5, 4), param(gen, 4, 3)
    w = gen.standard_normal((5, 3))
    check_gradients(lambda: (matmul(a, b) * w).sum(), [a, b], OP_TOL)


@pytest.mark.parametrize("op", ["sum", "mean", "logsumexp"])
@pytest.mark.parametrize("axis", [None, 0, 1])
def test_reduction_gradients(gen, op, axis):
    x = param(gen, 4, 5)
    shape = () if axis is None else (x.shape[1 - axis],)
    w = gen.standard_normal(shape)
    check_gradients(lambda: (reduce(op, x, axis) * w).sum(), [x], OP_TOL)


def test_logsumexp_is_stable_for_large_inputs():
    x = Tensor(np.array([[1000.0, 1000.0], [-1000.0, -1001.0]]))
    out = reduce("logsumexp", x, axis=1).data
    np.testing.assert_allclose(out, [1000.0 + np.log(2), -1000.0 + np.log1p(np.exp(-1))])


def test_indexing_reshape_transpose_concat_clip(gen):
    x = param(gen, 4, 6)
    y = param(gen, 4, 2)
    w = gen.standard_normal((7, 4))

    def loss():
        parts = concat([x[:, :3], y, x[:, [5, 5]].tanh()], axis=1)
        return (parts.T * w).reshape(28).sum() + clip(x, -0.5, 0.5).square().sum()

    x.data[np.abs(np.abs(x.data) - 0.5) < 1e-3] = 0.1
    check_gradients(loss, [x, y], OP_TOL)


def test_repeated_index_accumulates():
    x = Tensor(np.arange(3.0), requires_grad=True)
    with Tape() as tape:
        loss = x[[0, 0, 2]].sum()
    np.testing.assert_array_equal(backward(loss, tape)[x], [2.0, 0.0, 1.0])


def test_shared_subexpression_accumulates(gen):
    x = param(gen, 3)
    check_gradients(lambda: (x * x.exp() + x.exp()).sum(), [x], OP_TOL)


def test_domain_and_shape_errors():
    with pytest.raises(DomainError):
        Tensor([0.0, 1.0]).log()
    with pytest.raises(DomainError):
        elementwise("div", Tensor([1.0]), Tensor([0.0]))
    with pytest.raises(DomainError):
        elementwise("ndtri", Tensor([1.0]))
    with pytest.raises(DimensionError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(DimensionError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((3, 2)))
    with pytest.raises(ContractError):
        elementwise("cosh", Tensor([1.0]))


def test_backward_requires_scalar_loss():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ContractError):
        backward(y, tape)


def test_untracked_inputs_get_zero_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    c = Tensor(np.ones(3))
    unused = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        loss = (x * c).sum()
    grads = backward(loss, tape)
    assert c not in grads
    np.testing.assert_array_equal(grads[unused], np.zeros(2))


def test_no_tape_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        with no_tape():
            (x * 3.0).sum()
        assert len(tape) == 0
        x.exp()
        assert len(tape) == 1


def test_elbo_gradient_end_to_end():
    """Every parameter group of a tiny flow-prior / flow-posterior VAE."""
    model = build_led_vae(3, 2, Rng(3), likelihood="gaussian", enc_hidden=(5,), dec_hidden=(5,),
                          l_prior=2, prior_hidden=(4,), l_post=2, post_hidden=(6,),
                          activation="tanh")
    gen = np.random.default_rng(0)
    for p in model.parameters().values():
        # move off the identity initialisation so every path carries gradient
        p.data += 0.1 * gen.standard_normal(p.shape)
    x = gen.standard_normal((6, 3))

    def objective():
        return -elbo_led(model, x, np.random.default_rng(42)).elbo

    params = list(model.parameters().values())
    assert {g for g, ps in model.group_parameters().items() if ps} == {"theta", "phi", "pi"}
    check_gradients(objective, params, 1e-3)


def test_rng_streams_are_independent_and_reproducible():
    a, b = Rng(5), Rng(5)
    first = a.stream("init").standard_normal(3)
    a.stream("reparam-noise").standard_normal(100)
    np.testing.assert_array_equal(first, b.stream("init").standard_normal(3))
    np.testing.assert_array_equal(a.stream("init").standard_normal(2), b.stream("init").standard_normal(2))
    assert not np.array_equal(Rng(5).fresh("init").random(4), Rng(6).fresh("init").random(4))
    assert not np.array_equal(Rng(5).fresh("init").random(4), Rng(5).fresh("data").random(4))


def test_rng_state_round_trip():
    r = Rng(9)
    r.stream("init").random(7)
    r.stream("data-shuffle").random(3)
    clone = Rng.from_state(r.get_state())
    for name in ("init", "data-shuffle", "never-used"):
        np.testing.assert_array_equal(r.stream(name).random(5), clone.stream(name).random(5))


def test_adam_first_step_matches_closed_form():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam({"p": p}, lr=0.1)
    g = np.array([0.5, -3.0])
    opt.step({"p": g})
    # bias-corrected first step is lr * g / (|g| + eps)
    np.testing.assert_allclose(p.data, [1.0 - 0.1, -2.0 + 0.1], atol=1e-7)
    assert opt.state.step == 1


def test_adam_minimises_quadratic():
    p = Tensor(np.array([3.0, -1.0]), requires_grad=True)
    opt = Adam({"p": p}, lr=0.05)
    for _ in range(1000):
        with Tape() as tape:
            loss = ((p - Tensor(np.array([1.0, 2.0]))).square()).sum()
        opt.step(backward(loss, tape))
    np.testing.assert_allclose(p.data, [1.0, 2.0], atol=1e-3)


def test_adam_state_arrays_round_trip():
    p = Tensor(np.ones(3), requires_grad=True)
    opt = Adam({"p": p})
    opt.step({"p": np.arange(3.0)})
    other = Adam({"p": Tensor(np.ones(3), requires_grad=True)})
    other.load_state_arrays(opt.state_arrays(), opt.state.step)
    for k, v in opt.state_arrays().items():
        np.testing.assert_array_equal(other.state_arrays()[k], v)
    assert other.state.step == 1
