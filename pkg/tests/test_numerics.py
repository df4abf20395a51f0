import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csmlab.errors import ConfigurationError, NumericError, UsageError
from csmlab.numerics import (AdamState, LrSchedule, Tape, Tensor, adam_step, backward,
                             cosine_lr, grad_check, transformer_block)
from csmlab.numerics import autodiff as ad
from csmlab.numerics.layers import attention, init_block

from golden_util import check_golden


def block_params(rng, d=8, prefix="b", dtype=np.float64):
    return init_block(rng, d, prefix, dtype=dtype)


def leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0, scale, size=shape), requires_grad=True)


# ---------------------------------------------------------------------------
# transformer_block
# ---------------------------------------------------------------------------


def test_block_zero_projections_is_identity(rng):
    p = block_params(rng)
    for name in ("b.attn.proj.w", "b.attn.proj.b", "b.mlp.fc2.w", "b.mlp.fc2.b"):
        p[name].data[...] = 0.0
    x = Tensor(rng.normal(size=(5, 8)))
    out = transformer_block(x, p, "b", n_heads=2)
    np.testing.assert_array_equal(out.data, x.data)


def test_block_is_permutation_equivariant(rng):
    p = block_params(rng)
    x = rng.normal(size=(7, 8))
    perm = rng.permutation(7)
    a = transformer_block(Tensor(x), p, "b", 2).data
    b = transformer_block(Tensor(x[perm]), p, "b", 2).data
    np.testing.assert_allclose(b, a[perm], rtol=1e-12, atol=1e-12)


def reference_block(x, p, n_heads, eps=1e-5):
    """Plain-numpy pre-norm block used as an independent oracle."""
    g = {k[2:]: v.data for k, v in p.items()}

    def ln(v, gamma, beta):
        mu = v.mean(-1, keepdims=True)
        var = ((v - mu) ** 2).mean(-1, keepdims=True)
        return (v - mu) / np.sqrt(var + eps) * gamma + beta

    n, d = x.shape
    dh = d // n_heads
    h = ln(x, g["ln1.g"], g["ln1.b"])
    qkv = h @ g["attn.qkv.w"] + g["attn.qkv.b"]
    q, k, v = qkv[:, :d], qkv[:, d:2 * d], qkv[:, 2 * d:]
    heads = []
    for i in range(n_heads):
        sl = slice(i * dh, (i + 1) * dh)
        s = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
        a = np.exp(s - s.max(-1, keepdims=True))
        heads.append((a / a.sum(-1, keepdims=True)) @ v[:, sl])
    x = x + np.concatenate(heads, -1) @ g["attn.proj.w"] + g["attn.proj.b"]
    h = ln(x, g["ln2.g"], g["ln2.b"]) @ g["mlp.fc1.w"] + g["mlp.fc1.b"]
    h = 0.5 * h * (1 + np.tanh(math.sqrt(2 / math.pi) * (h + 0.044715 * h ** 3)))
    return x + h @ g["mlp.fc2.w"] + g["mlp.fc2.b"]


def golden_case():
    rng = np.random.default_rng(20240)
    p = block_params(rng)
    for t in p.values():  # non-trivial norms and biases
        t.data[...] += rng.normal(0, 0.3, size=t.shape)
    return p, rng.normal(size=(5, 8))


def test_block_matches_reference():
    p, x = golden_case()
    out = transformer_block(Tensor(x), p, "b", 2).data
    np.testing.assert_allclose(out, reference_block(x, p, 2), rtol=1e-12, atol=1e-12)


def test_block_golden():
    p, x = golden_case()
    check_golden("transformer_block_n5_d8", transformer_block(Tensor(x), p, "b", 2).data)


def test_block_shape_errors(rng):
    p = block_params(rng)
    with pytest.raises(ConfigurationError):
        transformer_block(Tensor(rng.normal(size=(5, 8))), p, "b", n_heads=3)
    with pytest.raises(ConfigurationError):
        transformer_block(Tensor(rng.normal(size=(5, 4))), p, "b", n_heads=2)


def test_block_non_finite_names_sublayer(rng):
    p = block_params(rng)
    p["b.mlp.fc2.b"].data[0] = np.inf
    with pytest.raises(NumericError, match="b.mlp"):
        transformer_block(Tensor(rng.normal(size=(3, 8))), p, "b", 2)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def test_backward_quadratic():
    w = Tensor(3.0, requires_grad=True)
    with Tape() as tape:
        loss = w * w
    grads = backward(loss, tape, {"w": w})
    assert grads["w"] == 6.0


def test_backward_unused_leaf_gets_exact_zero():
    a = Tensor(2.0, requires_grad=True)
    b = Tensor(np.ones((2, 3)), requires_grad=True)
    with Tape() as tape:
        loss = a * 1.0
    grads = backward(loss, tape, {"a": a, "b": b})
    assert grads["a"] == 1.0
    assert grads["b"].shape == (2, 3)
    assert np.all(grads["b"] == 0.0)


def test_backward_rejects_non_scalar(rng):
    x = leaf(rng, 3)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(UsageError):
        backward(y, tape)


def test_backward_rejects_loss_from_other_tape(rng):
    x = leaf(rng, 3)
    with Tape():
        y = ad.sum_(x)
    with pytest.raises(UsageError):
        backward(y, Tape())


def test_backward_accumulates_fan_out():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_(x * x + x)
    (g,) = backward(loss, tape, [x])
    np.testing.assert_array_equal(g, [3.0, 5.0])


def test_each_node_visited_once(rng):
    x = leaf(rng, 4)
    with Tape() as tape:
        loss = ad.sum_(ad.gelu(x) * ad.gelu(x))
    calls = []
    for node in tape.nodes:
        fn = node.backward

        def wrapped(g, fn=fn, node=node):
            calls.append(id(node))
            return fn(g)

        node.backward = wrapped
    backward(loss, tape)
    assert len(calls) == len(set(calls)) == len(tape.nodes)


# ---------------------------------------------------------------------------
# grad_check on primitives
# ---------------------------------------------------------------------------

PRIMITIVES = {
    "matmul": lambda p: ad.sum_(ad.gelu(p["a"] @ p["b"])),
    "add": lambda p: ad.sum_((p["a"][:, :1] + p["c"]) * p["c"]),
    "layer_norm": lambda p: ad.sum_(ad.layer_norm(p["c"], p["g"], p["h"]) * p["w"]),
    "softmax_attention": lambda p: ad.sum_(attention(p["c"], p["attn"], "attn", 2) * p["w"]),
    "gelu": lambda p: ad.sum_(ad.gelu(p["c"]) * p["w"]),
    "masked_mse": lambda p: ad.masked_mse(p["c"], p["t"].data, p["m"].data > 0),
}


def primitive_params(seed):
    rng = np.random.default_rng(seed)
    n, k = int(rng.integers(2, 6)), int(rng.integers(2, 5))
    d = 4
    attn = {k_: v for k_, v in init_block(rng, d, "x", dtype=np.float64).items() if ".attn." in k_}
    attn = {k_.replace("x.attn", "attn"): v for k_, v in attn.items()}
    p = {
        "a": leaf(rng, n, k), "b": leaf(rng, k, d), "c": leaf(rng, n, d),
        "g": leaf(rng, d), "h": leaf(rng, d), "w": leaf(rng, n, d),
        "t": Tensor(rng.normal(size=(n, d))),
        "m": Tensor((rng.random((n, d)) < 0.5).astype(float) + np.eye(n, d)),
    }
    return p, attn


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@pytest.mark.parametrize("seed", range(3))
def test_primitive_gradients(name, seed):
    p, attn = primitive_params(seed)
    fn = PRIMITIVES[name]
    params = {k: v for k, v in p.items() if k not in ("t", "m")}
    if name == "softmax_attention":
        params.update(attn)
    report = grad_check(lambda q: fn({**p, **q, "attn": attn}), params, eps=1e-5)
    assert report.max_rel_err < 1e-5, report


def test_sigmoid_and_log_softmax_gradients(rng):
    p = {"x": leaf(rng, 5), "w": leaf(rng, 5)}
    report = grad_check(lambda q: ad.sum_(ad.sigmoid(q["x"]) * q["w"])
                        + ad.sum_(ad.log_softmax(q["x"]) * q["w"]), p)
    assert report.max_rel_err < 1e-5


def test_grad_check_quadratic():
    w = Tensor(3.0, requires_grad=True)
    report = grad_check(lambda p: p["w"] * p["w"], {"w": w}, eps=1e-5)
    assert report.max_rel_err < 1e-8


def test_grad_check_constant_function():
    w = Tensor(np.ones(3), requires_grad=True)
    report = grad_check(lambda p: ad.sum_(p["w"]) * 0.0 + 5.0, {"w": w})
    assert report.max_rel_err == 0.0


def test_grad_check_detects_nondeterminism():
    counter = {"n": 0}

    def f(p):
        counter["n"] += 1
        return p["w"] * float(counter["n"])

    with pytest.raises(UsageError):
        grad_check(f, {"w": Tensor(1.0, requires_grad=True)})


def test_grad_check_rejects_bad_eps():
    with pytest.raises(UsageError):
        grad_check(lambda p: p["w"], {"w": Tensor(1.0, requires_grad=True)}, eps=0.0)


# ---------------------------------------------------------------------------
# Adam and the schedule
# ---------------------------------------------------------------------------


def test_adam_zero_gradient_no_decay_leaves_params():
    p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    state = AdamState.zeros_like(p)
    adam_step(p, {"w": np.zeros(2)}, state, lr=0.1)
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])
    assert state.t == 1


def test_adam_first_step_moves_by_lr():
    p = {"w": Tensor(0.0, requires_grad=True)}
    state = AdamState.zeros_like(p)
    adam_step(p, {"w": np.array(1.0)}, state, lr=0.1)
    # m_hat = v_hat = 1 at step one, so the update is lr / (1 + eps)
    assert p["w"].data == pytest.approx(-0.1 / (1.0 + 1e-8), abs=1e-15)


def test_adam_decoupled_weight_decay():
    p = {"w": Tensor(1.0, requires_grad=True)}
    state = AdamState.zeros_like(p)
    adam_step(p, {"w": np.array(0.0)}, state, lr=0.1, weight_decay=0.01)
    assert p["w"].data == pytest.approx(0.999, abs=1e-15)


def test_adam_coupled_weight_decay_flag():
    p = {"w": Tensor(1.0, requires_grad=True)}
    state = AdamState.zeros_like(p)
    adam_step(p, {"w": np.array(0.0)}, state, lr=0.1, weight_decay=0.01, decoupled=False)
    # decay enters the gradient, so the first bias-corrected step is ~lr
    assert p["w"].data == pytest.approx(0.9, abs=1e-6)


def test_adam_shape_mismatch():
    p = {"w": Tensor(np.zeros(3), requires_grad=True)}
    with pytest.raises(UsageError):
        adam_step(p, {"w": np.zeros(2)}, AdamState.zeros_like(p), lr=0.1)


def test_cosine_endpoints():
    sched = LrSchedule(base_lr=1e-3, total_steps=100, min_lr=1e-5)
    assert cosine_lr(0, sched) == 1e-3
    assert cosine_lr(100, sched) == pytest.approx(1e-5, abs=1e-18)
    assert cosine_lr(50, LrSchedule(1e-3, 100)) == pytest.approx(5e-4, abs=1e-18)


def test_cosine_out_of_range():
    sched = LrSchedule(1e-3, 10)
    with pytest.raises(UsageError):
        cosine_lr(11, sched)
    with pytest.raises(UsageError):
        cosine_lr(-1, sched)


@settings(max_examples=50, deadline=None)
@given(base=st.floats(1e-6, 1.0), frac=st.floats(0.0, 1.0), total=st.integers(1, 5000))
def test_cosine_monotone(base, frac, total):
    sched = LrSchedule(base, total, base * frac)
    values = [cosine_lr(s, sched) for s in range(0, total + 1, max(1, total // 50))]
    assert all(b <= a + 1e-15 for a, b in zip(values, values[1:]))
    assert values[0] == pytest.approx(base, rel=1e-12)


def test_schedule_validation():
    with pytest.raises(UsageError):
        LrSchedule(1e-3, 0)
    with pytest.raises(UsageError):
        LrSchedule(1e-3, 10, min_lr=1.0)


def test_f32_precision_preserved(rng):
    x = Tensor(rng.normal(size=(3, 4)).astype(np.float32), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_(ad.gelu(x) * 2.0)
    (g,) = backward(loss, tape, [x])
    assert loss.dtype == np.float32 and g.dtype == np.float32
    assert math.isfinite(float(loss.data))
