"""Shared test utilities: central finite-difference gradient oracle."""

import numpy as np


def fd_grad(fn, x, step=1e-3, quantized=False):
    """Central finite differences of a scalar function at x (any shape).

    With quantized=True the perturbed points are rounded to float32 first and
    the divisor uses the effective step, so float32 storage inside fn does not
    corrupt the estimate.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        up_v = float(np.float32(orig + step)) if quantized else orig + step
        down_v = float(np.float32(orig - step)) if quantized else orig - step
        flat[i] = up_v
        up = fn(x)
        flat[i] = down_v
        down = fn(x)
        flat[i] = orig
        gf[i] = (up - down) / (up_v - down_v)
    return g


def rel_err(a, b, floor=1e-8):
    """Norm-ratio relative error ||a-b|| / max(||a||, ||b||)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def check_layer_grads(make_layer, in_shape, rng, n_trials=20, tol=1e-4, step=1e-3):
    """Analytic vs finite-difference input and parameter gradients.

    The layer map is probed through a fixed random linear functional so the
    check reduces to a scalar.
    """
    for trial in range(n_trials):
        layer = make_layer()
        # offset inputs away from relu/maxpool kinks so FD is clean
        x = rng.normal(size=in_shape).astype(np.float64)
        x[np.abs(x) < 0.05] += 0.1
        out = layer.forward(x)
        r = rng.normal(size=out.shape)

        def loss_at_x(xv):
            return float((layer.forward(xv) * r).sum())

        layer.forward(x)
        for p in layer.params():
            p.zero_grad()
        dx = layer.backward(r)
        assert rel_err(dx, fd_grad(loss_at_x, x, step)) < tol, \
            f"{layer.name}: input gradient mismatch on trial {trial}"

        for p in layer.params():
            value = p.value.copy()

            def loss_at_p(pv, p=p, value=value):
                p.value[...] = pv.astype(np.float32)
                out = float((layer.forward(x) * r).sum())
                p.value[...] = value
                return out

            assert rel_err(p.grad, fd_grad(loss_at_p, value.astype(np.float64), step, quantized=True)) < tol, \
                f"{layer.name}/{p.name}: param gradient mismatch on trial {trial}"
