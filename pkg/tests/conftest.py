import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def ref_conv2d(x, w, stride, pad):
    """Brute-force dense convolution, used as the oracle for the fast kernel."""
    b, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    y = np.zeros((b, cout, ho, wo), dtype=np.float64)
    for bi in range(b):
        for oc in range(cout):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[bi, :, i * stride : i * stride + k, j * stride : j * stride + k]
                    y[bi, oc, i, j] = np.sum(patch.astype(np.float64) * w[oc].astype(np.float64))
    return y


def finite_diff(loss_fn, arr, eps=1e-3, samples=None, rng=None):
    """Central finite differences of ``loss_fn()`` wrt entries of ``arr``.

    Returns (indices, gradient estimates). ``samples`` limits how many
    entries are probed (chosen by ``rng``), keeping f32 checks fast.
    """
    flat = arr.reshape(-1)
    if samples is None or samples >= flat.size:
        idx = np.arange(flat.size)
    else:
        idx = rng.choice(flat.size, size=samples, replace=False)
    grads = np.empty(len(idx), dtype=np.float64)
    for n, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + eps
        lp = loss_fn()
        flat[i] = orig - eps
        lm = loss_fn()
        flat[i] = orig
        grads[n] = (lp - lm) / (2 * eps)
    return idx, grads


def rel_err(a, b, floor=1.0):
    """Elementwise |a-b| / max(|a|, |b|, floor)."""
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.abs(a - b) / denom
