"""Central finite-difference gradient oracle shared by the test suite."""

import numpy as np

from segdt.autodiff import Tensor


def finite_diff_check(fn, inputs, step=1e-3, rtol=1e-4, atol=1e-8):
    """Compare analytic gradients of scalar ``fn(*tensors)`` to central differences.

    ``inputs`` is a list of numpy arrays; each becomes a requires-grad Tensor.
    Returns the worst relative error observed.
    """
    tensors = [Tensor(np.asarray(x, dtype=np.float64), requires_grad=True) for x in inputs]
    loss = fn(*tensors)
    loss.backward()
    analytic = [t.grad.copy() for t in tensors]

    worst = 0.0
    for i, base in enumerate(inputs):
        base = np.asarray(base, dtype=np.float64)
        num = np.zeros_like(base)
        flat = base.reshape(-1)
        for j in range(flat.size):
            plus = flat.copy()
            plus[j] += step
            minus = flat.copy()
            minus[j] -= step
            args_p = [np.asarray(x, dtype=np.float64) for x in inputs]
            args_m = [np.asarray(x, dtype=np.float64) for x in inputs]
            args_p[i] = plus.reshape(base.shape)
            args_m[i] = minus.reshape(base.shape)
            fp = fn(*[Tensor(a) for a in args_p]).item()
            fm = fn(*[Tensor(a) for a in args_m]).item()
            num.reshape(-1)[j] = (fp - fm) / (2.0 * step)
        denom = np.maximum(np.abs(num), np.abs(analytic[i]))
        err = np.abs(analytic[i] - num) / np.maximum(denom, atol / rtol)
        worst = max(worst, float(err.max()) if err.size else 0.0)
        assert np.allclose(analytic[i], num, rtol=rtol, atol=atol), (
            f"input {i}: max rel err {err.max():.3e} (analytic vs finite diff)"
        )
    return worst
