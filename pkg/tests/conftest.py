"""Shared oracles and helpers for the test suite."""

import numpy as np
import pytest

from tumorreg.autodiff import Tensor


def fd_gradcheck(build, leaves, h=1e-3, sample=None, rng=None):
    """Norm-relative error between autodiff and central finite differences.

    `build` must construct the scalar loss freshly from the leaf tensors.
    Errors are measured relative to the leaf's overall gradient scale
    (float32 evaluation noise makes near-zero components meaningless on
    their own). With `sample`, half the probes go to the largest autodiff
    components and half to random entries.
    """
    for leaf in leaves:
        leaf.grad = None
    build().backward()
    worst = 0.0
    for leaf in leaves:
        g_ad = leaf.grad.reshape(-1).copy() if leaf.grad is not None \
            else np.zeros(leaf.size, dtype=np.float32)
        flat = leaf.data.reshape(-1)
        if sample is not None and flat.size > sample:
            rng = rng if rng is not None else np.random.default_rng(0)
            top = np.argsort(-np.abs(g_ad))[:sample // 2]
            rand = rng.choice(flat.size, size=sample - len(top), replace=False)
            idx = np.unique(np.concatenate([top, rand]))
        else:
            idx = np.arange(flat.size)
        g_fd = np.zeros(len(idx))
        for k, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            lp = build().item()
            flat[i] = orig - h
            lm = build().item()
            flat[i] = orig
            g_fd[k] = (lp - lm) / (2.0 * h)
        denom = max(np.abs(g_fd).max(), np.abs(g_ad).max(), 1e-6)
        worst = max(worst, float(np.abs(g_ad[idx] - g_fd).max() / denom))
    return worst


def conv3d_oracle(x, w, stride=1, padding=None, bias=None):
    """Brute-force convolution sum, the independent reference for conv3d."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    co, ci, k = w.shape[0], w.shape[1], w.shape[2]
    if padding is None:
        padding = (k - 1) // 2
    d, h, wd = x.shape[1:]
    do = (d + 2 * padding - k) // stride + 1
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    xp = np.pad(x, ((0, 0),) + ((padding, padding),) * 3)
    out = np.zeros((co, do, ho, wo))
    for o in range(co):
        for z in range(do):
            for y in range(ho):
                for xx in range(wo):
                    patch = xp[:, z * stride:z * stride + k,
                               y * stride:y * stride + k,
                               xx * stride:xx * stride + k]
                    out[o, z, y, xx] = (patch * w[o]).sum()
        if bias is not None:
            out[o] += bias[o]
    return out


def smooth_velocity(extents, rng, amplitude, sigma=2.0, taper=3.0):
    from tumorreg.phantom import random_smooth_velocity
    return random_smooth_velocity(extents, rng, amplitude, sigma, taper)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def t(data, requires_grad=False):
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=requires_grad)
