"""Tensor ops, reverse-mode gradients vs finite differences, checkpoints."""

import numpy as np
import pytest

from abutmesh import autodiff as ad
from abutmesh.optim import AdamW, clip_global_norm, cosine_lr

RNG = np.random.default_rng(20240901)


def t(*shape):
    return ad.Tensor(RNG.standard_normal(shape), requires_grad=True)


def quad(x):  # smooth scalar readout of any tensor
    return ad.sum_(ad.mul(x, x))


def test_matmul_identity():
    a = RNG.standard_normal((5, 5))
    out = ad.matmul(ad.Tensor(a), ad.Tensor(np.eye(5)))
    assert np.array_equal(out.data, a)


def test_softmax_rows_sum_to_one():
    s = ad.softmax(t(6, 9), axis=-1)
    assert np.allclose(s.data.sum(axis=-1), 1.0, atol=1e-6)


def test_matmul_backward_closed_form():
    a, b = t(3, 4), t(4, 5)
    ad.sum_(ad.matmul(a, b)).backward()
    assert np.allclose(a.grad, np.ones((3, 5)) @ b.data.T, atol=1e-12)
    assert np.allclose(b.grad, a.data.T @ np.ones((3, 5)), atol=1e-12)


def test_shape_mismatch_messages():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 5\)"):
        ad.matmul(t(2, 3), t(4, 5))
    with pytest.raises(ValueError, match="add"):
        ad.add(t(2, 3), t(4,))


OPS = {
    "matmul": (lambda a, b: quad(ad.matmul(a, b)), lambda: [t(3, 4), t(4, 2)]),
    "matmul_batched": (lambda a, b: quad(ad.matmul(a, b)), lambda: [t(2, 3, 4), t(2, 4, 3)]),
    "matmul_broadcast": (lambda a, b: quad(ad.matmul(a, b)), lambda: [t(2, 3, 4), t(4, 3)]),
    "add": (lambda a, b: quad(ad.add(a, b)), lambda: [t(3, 4), t(4)]),
    "sub": (lambda a, b: quad(ad.sub(a, b)), lambda: [t(3, 4), t(3, 1)]),
    "mul": (lambda a, b: quad(ad.mul(a, b)), lambda: [t(3, 4), t(3, 4)]),
    "scale": (lambda a: quad(ad.scale(a, -1.7)), lambda: [t(5)]),
    "concat": (lambda a, b: quad(ad.concat([a, b], axis=1)), lambda: [t(2, 3), t(2, 4)]),
    "slice": (lambda a: quad(ad.slice_(a, (slice(1, 3), slice(0, 2)))), lambda: [t(4, 5)]),
    "transpose": (lambda a: quad(ad.transpose(a)), lambda: [t(4, 3)]),
    "transpose_axes": (lambda a: quad(ad.transpose(a, (2, 0, 1))), lambda: [t(2, 3, 4)]),
    "reshape": (lambda a: quad(ad.reshape(a, (6, 2))), lambda: [t(3, 4)]),
    "softmax": (lambda a: quad(ad.softmax(a, axis=-1)), lambda: [t(3, 5)]),
    "layer_norm": (
        lambda x, g, b: quad(ad.layer_norm(x, g, b)),
        lambda: [t(4, 6), t(6), t(6)],
    ),
    "gelu": (lambda x: quad(ad.gelu(x)), lambda: [t(4, 5)]),
    "linear": (lambda x, w, b: quad(ad.linear(x, w, b)), lambda: [t(3, 4), t(4, 2), t(2)]),
    "mean_pool": (lambda a: quad(ad.mean_(a, axis=0, keepdims=True)), lambda: [t(4, 5)]),
    "mean_all": (lambda a: ad.mean_(ad.mul(a, a)), lambda: [t(3, 4)]),
    "sum_axis": (lambda a: quad(ad.sum_(a, axis=1)), lambda: [t(3, 4)]),
    "max_pool": (lambda a: quad(ad.max_(a, axis=0)), lambda: [t(4, 5)]),
    "embedding_lookup": (
        lambda tbl: quad(ad.embedding_lookup(tbl, np.array([0, 2, 2, 1]), axis=0)),
        lambda: [t(4, 3)],
    ),
    "abs": (lambda a: ad.sum_(ad.abs_(a)), lambda: [t(4, 5)]),
    "where_mask": (
        lambda a, b, _m=RNG.standard_normal((3, 4)) > 0: quad(ad.where_mask(_m, a, b)),
        lambda: [t(3, 4), t(3, 4)],
    ),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_grad_check_each_op(name):
    fn, make_inputs = OPS[name]
    err = ad.grad_check(fn, make_inputs(), eps=1e-4)
    assert err < 1e-3, f"{name}: finite-difference mismatch {err:.2e}"


def test_linear_layer_tight_tolerance():
    err = ad.grad_check(
        lambda x, w, b: ad.sum_(ad.linear(x, w, b)), [t(3, 4), t(4, 2), t(2)], eps=1e-4
    )
    assert err < 1e-4


def test_layer_norm_gelu_chain():
    err = ad.grad_check(
        lambda x, g, b: ad.mean_(ad.gelu(ad.layer_norm(x, g, b))),
        [t(5, 8), t(8), t(8)],
        eps=1e-4,
    )
    assert err < 1e-3


def test_constant_function_zero_gradient():
    x = t(4)
    const = ad.Tensor(np.ones(3))
    err = ad.grad_check(lambda a: ad.sum_(ad.mul(const, const)), [x], eps=1e-4)
    assert err == 0.0


def test_forward_determinism():
    a = t(16, 16)
    b = t(16, 16)
    f = lambda: ad.softmax(ad.matmul(ad.gelu(a), b), axis=-1).data
    assert np.array_equal(f(), f())


def test_gradient_accumulates_over_reuse():
    x = t(3)
    y = ad.add(ad.mul(x, x), ad.mul(x, x))
    ad.sum_(y).backward()
    assert np.allclose(x.grad, 4 * x.data, atol=1e-12)


def test_take_and_slice_values():
    a = ad.Tensor(np.arange(12.0).reshape(4, 3))
    assert np.array_equal(ad.take(a, np.array([2, 0]), axis=0).data, a.data[[2, 0]])
    assert np.array_equal(ad.slice_(a, (slice(None), 1)).data, a.data[:, 1])


def test_max_pool_tie_routes_to_first():
    a = ad.Tensor(np.array([[1.0, 3.0], [3.0, 0.0], [3.0, 2.0]]), requires_grad=True)
    out = ad.sum_(ad.max_(a, axis=0))
    out.backward()
    assert np.array_equal(a.grad, np.array([[0.0, 1.0], [1.0, 0.0], [0.0, 0.0]]))


def test_float32_mode_keeps_dtype():
    x = ad.Tensor(np.ones((3, 3), dtype=np.float32), requires_grad=True)
    y = ad.mean_(ad.gelu(ad.matmul(x, x)))
    assert y.dtype == np.float32
    y.backward()
    assert x.grad.dtype == np.float32


# -- parameters / init / seeds


def test_trunc_normal_is_bounded_and_seeded():
    rng = np.random.default_rng(7)
    x = ad.trunc_normal((1000,), 0.02, rng)
    assert np.abs(x).max() <= 0.04 + 1e-12
    y = ad.trunc_normal((1000,), 0.02, np.random.default_rng(7))
    assert np.array_equal(x, y)


def test_derive_seed_stable_and_distinct():
    assert ad.derive_seed("a", 1) == ad.derive_seed("a", 1)
    assert ad.derive_seed("a", 1) != ad.derive_seed("a", 2)
    assert ad.derive_seed("a", 12) != ad.derive_seed("a1", 2)


# -- checkpoint archive


def test_checkpoint_roundtrip(tmp_path):
    arrays = {
        "enc.w": RNG.standard_normal((4, 5)),
        "enc.b": RNG.standard_normal(5).astype(np.float32),
        "scalar": np.array(3.5),
    }
    path = tmp_path / "model.ckpt"
    ad.save_checkpoint(arrays, path)
    loaded = ad.load_checkpoint(path)
    assert set(loaded) == set(arrays)
    for k in arrays:
        assert np.array_equal(loaded[k], arrays[k])
        assert loaded[k].dtype == arrays[k].dtype


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"definitely not a checkpoint")
    with pytest.raises(ValueError, match="not a checkpoint"):
        ad.load_checkpoint(path)


# -- optimizer


def test_adamw_minimizes_quadratic():
    x = ad.Tensor(np.array([5.0, -3.0]), requires_grad=True)
    opt = AdamW({"x": x}, lr=0.1)
    for _ in range(400):
        opt.zero_grad()
        loss = ad.sum_(ad.mul(x, x))
        loss.backward()
        opt.step()
    assert np.abs(x.data).max() < 1e-3


def test_clip_global_norm():
    x = ad.Tensor(np.zeros(4), requires_grad=True)
    x.grad = np.full(4, 10.0)
    norm = clip_global_norm({"x": x}, 1.0)
    assert norm == pytest.approx(20.0)
    assert np.linalg.norm(x.grad) == pytest.approx(1.0, rel=1e-6)


def test_cosine_schedule_endpoints():
    assert cosine_lr(0, 100, 1e-3) == pytest.approx(1e-3)
    assert cosine_lr(99, 100, 1e-3) == pytest.approx(0.0, abs=1e-12)
    assert cosine_lr(0, 1, 1e-3) == 1e-3
