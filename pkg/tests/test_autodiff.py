import numpy as np
import pytest

from sglkf import autodiff as ad
from gradcheck import central_diff, rel_err


def _check(fn, shapes, rng, positive=False):
    tape = ad.Tape()
    vals = [rng.uniform(0.5, 2.0, s) if positive else rng.standard_normal(s) for s in shapes]
    leaves = [tape.leaf(v) for v in vals]
    out = fn(*leaves)
    grads = tape.backward(ad.vsum(out))
    for k, v in enumerate(vals):
        flat = v.ravel().copy()

        def f(vec, k=k):
            args = [w for w in vals]
            args[k] = vec.reshape(v.shape)
            return float(np.sum(fn(*args) if not isinstance(fn(*args), ad.Var) else fn(*args).value))

        g = grads[leaves[k]].ravel()
        for i in range(flat.size):
            assert rel_err(g[i], central_diff(f, flat, i, 1e-6)) < 1e-5


OPS = [
    (lambda a, b: a * b + a / b - b, [(3, 2), (3, 2)], True),
    (lambda a, b: ad.matmul(a, b), [(3, 4), (4, 2)], False),
    (lambda a: ad.exp(a) + ad.log(a) + ad.sqrt(a) + ad.softplus(a) + ad.arctan(a), [(5,)], True),
    (lambda a, b: ad.maximum(a, b) - ad.minimum(a, 0.3 * b), [(6,), (6,)], False),
    (lambda a: ad.vsum(ad.square(a), axis=0, keepdims=True) * a, [(3, 3)], False),
    (lambda a, b: ad.concatenate([a, b], axis=-1)[:, 1:4], [(2, 3), (2, 2)], False),
    (lambda a, b: ad.stack([a, b], axis=1).swapaxes(0, 1).reshape(-1), [(2, 3), (2, 3)], False),
    (lambda a, b: ad.solve(ad.matmul(a, ad.swapaxes(a, 0, 1)) + 3.0 * np.eye(3), b), [(3, 3), (3, 2)], False),
    (lambda a: ad.diag_embed(a) * 2.0, [(2, 3)], False),
    (lambda a: ad.where(np.array([True, False, True]), a, 2.0 * a), [(3,)], False),
    (lambda a, b: a + b, [(3, 2), (2,)], False),
]


@pytest.mark.parametrize("fn,shapes,positive", OPS)
def test_op_gradients(fn, shapes, positive, rng):
    _check(fn, shapes, rng, positive)


def test_readme_example():
    tape = ad.Tape()
    x = tape.leaf(np.array([1.0, 2.0]))
    grads = tape.backward((x * x).sum())
    np.testing.assert_array_equal(grads[x], [2.0, 4.0])


def test_unused_leaf_has_zero_grad():
    tape = ad.Tape()
    x, y = tape.leaf(np.ones(3)), tape.leaf(np.ones(2))
    g = tape.backward(ad.vsum(x))
    np.testing.assert_array_equal(g[y], 0.0)


def test_custom_op():
    tape = ad.Tape()
    x = tape.leaf(np.array([1.0, 2.0, 3.0]))
    y = ad.custom([x], x.value ** 3, lambda g: [g * 3 * x.value ** 2])
    np.testing.assert_allclose(tape.backward(ad.vsum(y))[x], [3.0, 12.0, 27.0])
