"""Independent reference implementations used as test oracles.

Nothing here touches the autodiff tape or the compiled kernels.
"""
import numpy as np


def central_difference(f, arrays, step=1e-5):
    """Gradient of scalar ``f(*arrays)`` w.r.t. each array by central differences."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = a[idx]
            a[idx] = orig + step
            hi = f(*arrays)
            a[idx] = orig - step
            lo = f(*arrays)
            a[idx] = orig
            g[idx] = (hi - lo) / (2 * step)
        grads.append(g)
    return grads


def complex_step(f, arrays, step=1e-30):
    """Gradient of real-analytic ``f(*arrays)`` as Im f(x + i h) / h.

    No difference of nearly equal numbers is taken, so the result stays
    accurate relative to the gradient even when the gradient is tiny.
    """
    arrays = [np.asarray(a, dtype=complex) for a in arrays]
    grads = []
    for a in arrays:
        g = np.zeros(a.shape)
        for idx in np.ndindex(a.shape):
            orig = a[idx]
            a[idx] = orig + 1j * step
            g[idx] = np.imag(f(*arrays)) / step
            a[idx] = orig
        grads.append(g)
    return grads


def rel_err(analytic, numeric, atol=1e-8):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = np.maximum(np.abs(analytic) + np.abs(numeric), atol)
    return float(np.max(np.abs(analytic - numeric) / scale))


def grad_rel_err(analytic, numeric):
    """Relative error measured against the gradient's overall magnitude."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
    return float(np.linalg.norm(analytic - numeric) / denom)


def brute_snn(h, s, y, temp, c=None):
    """Soft nearest-neighbor assignment evaluated with explicit Python loops."""
    n, k = len(h), len(s)
    c = np.ones(k) if c is None else c
    out = np.zeros((n, y.shape[1]))
    for i in range(n):
        sims = []
        for j in range(k):
            nh = max(np.sqrt(sum(v * v for v in h[i])), 1e-12)
            ns = max(np.sqrt(sum(v * v for v in s[j])), 1e-12)
            sims.append(sum(a * b for a, b in zip(h[i], s[j])) / (nh * ns))
        e = [np.exp(c[j] * sims[j] / temp) for j in range(k)]
        z = sum(e)
        for j in range(k):
            out[i] += e[j] / z * y[j]
    return out


def direct_ce(pred, target, floor=1e-12):
    total = 0.0
    for p_row, t_row in zip(pred, target):
        total -= sum(t * np.log(p + floor) for p, t in zip(p_row, t_row))
    return total / len(pred)


def entropy(p, floor=1e-12):
    return -sum(v * np.log(v + floor) for v in p)


# vectorized numpy references, used where the loop versions would be too slow
# inside finite-difference sweeps


# The helpers below also accept complex input so that complex_step can
# differentiate through them; comparisons use the real part.


def np_relu(x):
    return np.where(x.real > 0, x, 0.0)


def np_relu_mlp(params, x, n_hidden):
    """Backbone, projector and head of the reference architecture in plain numpy."""
    z = x
    for i in range(n_hidden):
        z = np_relu(z @ params[f"backbone.{i}.weight"] + params[f"backbone.{i}.bias"])
    hidden = np_relu(z @ params["projector.0.weight"] + params["projector.0.bias"])
    proj = hidden @ params["projector.1.weight"] + params["projector.1.bias"]
    logits = z @ params["classifier.weight"] + params["classifier.bias"]
    return z, proj, logits


def np_softmax(logits, temp=1.0, mask=None):
    scaled = logits / temp
    if mask is not None:
        scaled = np.where(mask, scaled, -np.inf)
    scaled = scaled - scaled.real.max(axis=1, keepdims=True)
    e = np.exp(scaled)
    return e / e.sum(axis=1, keepdims=True)


def np_unit(x):
    norms = np.sqrt(np.sum(x * x, axis=1, keepdims=True))
    return x / np.where(norms.real > 1e-12, norms, 1e-12)


def np_snn(h, s, y, temp):
    return np_softmax(np_unit(h) @ np_unit(s).T, temp) @ y


def np_ce(pred, target, floor=1e-12):
    return -np.mean(np.sum(target * np.log(pred + floor), axis=1))


def np_entropy(p, floor=1e-12):
    return -np.sum(p * np.log(p + floor))
