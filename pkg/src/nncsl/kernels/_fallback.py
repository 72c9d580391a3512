"""Pure-numpy soft nearest-neighbor kernels.

Same signatures and results as the compiled ``_snn`` extension; used when the
extension is not built or ``NNCSL_PURE_PYTHON`` is set.
"""
import numpy as np

NORM_FLOOR = 1e-12


def row_normalize(x, floor=NORM_FLOOR):
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    norms = np.maximum(norms, floor)
    return x / norms[:, None], norms


def normalize_backward(grad_unit, unit, norms, floor=NORM_FLOOR):
    # a row at the floor is (numerically) the zero vector, where the direction
    # is undefined; it gets a zero subgradient instead of a 1/floor blow-up
    radial = np.einsum("ij,ij->i", grad_unit, unit)
    live = norms > floor
    out = (grad_unit - unit * radial[:, None]) / norms[:, None]
    return np.where(live[:, None], out, 0.0)


def snn_forward(h, s, y, temperature):
    """Soft nearest-neighbor assignment of queries ``h`` against supports ``s``.

    Returns ``(probs, weights, h_unit, s_unit, h_norms, s_norms)``; everything
    after ``probs`` is the cache consumed by :func:`snn_backward`.
    """
    h_unit, h_norms = row_normalize(h)
    s_unit, s_norms = row_normalize(s)
    logits = (h_unit @ s_unit.T) / temperature
    logits -= logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=1, keepdims=True)
    probs = weights @ y
    return probs, weights, h_unit, s_unit, h_norms, s_norms


def snn_backward(grad_probs, y, weights, h_unit, s_unit, h_norms, s_norms, temperature):
    """Returns gradients w.r.t. ``(h, s, y)``."""
    grad_y = weights.T @ grad_probs
    grad_w = grad_probs @ y.T
    inner = np.einsum("ij,ij->i", grad_w, weights)
    grad_sim = weights * (grad_w - inner[:, None]) / temperature
    grad_h_unit = grad_sim @ s_unit
    grad_s_unit = grad_sim.T @ h_unit
    grad_h = normalize_backward(grad_h_unit, h_unit, h_norms)
    grad_s = normalize_backward(grad_s_unit, s_unit, s_norms)
    return grad_h, grad_s, grad_y
