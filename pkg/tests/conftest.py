"""Shared test helpers: finite-difference gradient checking and tiny
observation factories."""

from __future__ import annotations

import numpy as np
import pytest

from pvdiff import autodiff as ad
from pvdiff.autodiff import GradientTape, Tensor


@pytest.fixture
def f64_mode():
    with ad.default_dtype(np.float64):
        yield


def numeric_gradient(f, x: np.ndarray, h: float) -> np.ndarray:
    """Central finite differences of a scalar function w.r.t. array x.

    x is perturbed in place and restored; f() must recompute the forward
    pass from the current contents of x.
    """
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        step = h * max(1.0, abs(float(orig)))
        flat[i] = orig + step
        f_plus = f()
        flat[i] = orig - step
        f_minus = f()
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def gradient_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max elementwise error relative to the gradient's own scale."""
    analytic = np.asarray(analytic, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0),
                np.abs(numeric).max(initial=0.0), 1e-6)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def fd_step() -> float:
    return 1e-2 if ad.get_default_dtype() == np.float32 else 1e-5


def check_op_gradients(build_loss, wrt: list[Tensor], rtol: float) -> None:
    """build_loss() -> scalar Tensor from the current .data of wrt tensors."""
    with GradientTape() as tape:
        loss = build_loss()
        tape.backward(loss, params=wrt)
    h = fd_step()
    for t in wrt:
        numeric = numeric_gradient(lambda: build_loss().item(), t.data, h)
        err = gradient_error(t.grad, numeric)
        assert err <= rtol, f"gradient mismatch {err:.2e} > {rtol:.0e} for shape {t.shape}"
    for t in wrt:
        t.grad = None


def rand_tensor(rng: np.random.Generator, shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


# one gradcheck trial per differentiable primitive; shared by the unit suite
# (few trials) and the acceptance suite (100 trials)
def op_gradcheck_trial(rng: np.random.Generator, rtol: float) -> None:
    dims = lambda n: tuple(int(rng.integers(1, 9)) for _ in range(n))

    a = rand_tensor(rng, dims(2))
    b = rand_tensor(rng, a.shape)
    check_op_gradients(lambda: ad.sum_(ad.mul(ad.add(a, b), ad.sub(a, b))), [a, b], rtol)

    # broadcasting add/mul
    r, c = dims(2)
    x = rand_tensor(rng, (r, c))
    row = rand_tensor(rng, (1, c))
    check_op_gradients(lambda: ad.sum_(ad.mul(ad.add(x, row), row)), [x, row], rtol)

    y = rand_tensor(rng, a.shape, scale=0.5)
    check_op_gradients(lambda: ad.sum_(ad.div(a, ad.add(ad.mul(y, y), 1.0))), [a, y], rtol)
    check_op_gradients(
        lambda: ad.sum_(ad.sub(ad.pow_scalar(ad.add(ad.mul(y, y), 0.5), 1.5), 0.5)),
        [y], rtol,
    )
    # exp - 1 keeps the summed loss near zero, so float32 differencing does
    # not drown the gradient in cancellation noise
    check_op_gradients(lambda: ad.sum_(ad.sub(ad.exp(ad.mul(y, 0.3)), 1.0)), [y], rtol)
    check_op_gradients(lambda: ad.sum_(ad.gelu(a)), [a], rtol)
    check_op_gradients(lambda: ad.sum_(ad.neg(a)), [a], rtol)

    m, k, n = dims(3)
    p = rand_tensor(rng, (m, k))
    q = rand_tensor(rng, (k, n))
    check_op_gradients(lambda: ad.sum_(ad.matmul(p, q)), [p, q], rtol)
    bt = rand_tensor(rng, (2, m, k))
    check_op_gradients(lambda: ad.sum_(ad.matmul(bt, q)), [bt, q], rtol)

    t3 = rand_tensor(rng, dims(3))
    check_op_gradients(lambda: ad.sum_(ad.reshape(t3, (t3.size,))), [t3], rtol)
    check_op_gradients(lambda: ad.sum_(ad.mul(ad.transpose(t3, (2, 0, 1)), 2.0)), [t3], rtol)
    check_op_gradients(
        lambda: ad.sum_(ad.mul(ad.broadcast_to(row, (r, c)), x)), [row, x], rtol
    )

    u = rand_tensor(rng, dims(2))
    v = rand_tensor(rng, (u.shape[0], int(rng.integers(1, 9))))
    check_op_gradients(lambda: ad.sum_(ad.mul(ad.concat([u, v], axis=1), 1.5)), [u, v], rtol)
    w = rand_tensor(rng, (4, 6))
    check_op_gradients(lambda: ad.sum_(ad.narrow(w, 1, 1, 3)), [w], rtol)
    idx = rng.integers(0, 4, size=5)
    check_op_gradients(lambda: ad.sum_(ad.gather(w, idx, axis=0)), [w], rtol)

    s = rand_tensor(rng, dims(2))
    check_op_gradients(lambda: ad.sum_(ad.sum_(s, axis=1)), [s], rtol)
    check_op_gradients(lambda: ad.sum_(ad.mean(s, axis=0)), [s], rtol)
    check_op_gradients(lambda: ad.mean(s), [s], rtol)
    check_op_gradients(lambda: ad.sum_(ad.mul(ad.softmax(s, axis=-1), s)), [s], rtol)

    # max has a kink where the top two entries cross; keep them separated
    # by much more than the finite-difference step
    while True:
        mx = rng.normal(0.0, 1.0, size=s.shape)
        top2 = np.sort(mx, axis=1)[:, -2:]
        if s.shape[1] == 1 or (top2[:, 1] - top2[:, 0]).min() > 0.2:
            break
    mx_t = Tensor(mx, requires_grad=True)
    check_op_gradients(lambda: ad.sum_(ad.max_reduce(mx_t, axis=1)), [mx_t], rtol)

    # near-constant rows give layer_norm huge curvature (1/sigma^3), which
    # central differences cannot resolve; keep rows non-degenerate
    width = int(rng.integers(3, 9))
    while True:
        ln = rng.normal(0.0, 1.0, size=(3, width))
        if ln.std(axis=1).min() > 0.5:
            break
    ln_x = Tensor(ln, requires_grad=True)
    g = rand_tensor(rng, (width,))
    bb = rand_tensor(rng, (width,))
    check_op_gradients(
        lambda: ad.sum_(ad.mul(ad.layer_norm(ln_x, g, bb, eps=1e-5), ln_x)),
        [ln_x, g, bb], rtol,
    )
