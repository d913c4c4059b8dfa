"""Recurrent encoder-decoder that predicts one velocity field per step.

Each encoder level is a convolutional LSTM cell followed by a stride-2
convolution with LeakyReLU; hidden and cell states persist across the
recurrent steps. The decoder mirrors the encoder with trilinear
upsampling and concatenated skip connections, ending in a zero-initialized
flow head so a fresh network performs the exact identity registration.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

GATES = ("f", "i", "c", "o")


class NetworkParams:
    """Named, ordered collection of learnable tensors."""

    def __init__(self, tensors: dict, order: list):
        self._tensors = tensors
        self.order = list(order)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def items(self):
        for name in self.order:
            yield name, self._tensors[name]

    def tensors(self):
        return [self._tensors[name] for name in self.order]

    def zero_grad(self):
        for t in self._tensors.values():
            t.grad = None

    def num_values(self) -> int:
        return sum(t.size for t in self._tensors.values())


def param_spec(levels: int, channels, in_channels: int = 4,
               full_res_flow: bool = False) -> list:
    """Canonical (name, shape) list for the whole network.

    The order is frozen: checkpoints serialize buffers in exactly this
    sequence.
    """
    channels = tuple(int(c) for c in channels)
    if levels < 2:
        raise ValueError(f"levels must be >= 2, got {levels}")
    if len(channels) != levels:
        raise ValueError(f"need one channel width per level: {len(channels)} != {levels}")
    if any(c <= 0 for c in channels):
        raise ValueError(f"channel widths must be positive, got {channels}")
    spec = []
    in_w = in_channels
    for lvl in range(levels):
        hid = channels[lvl]
        for gate in GATES:
            spec.append((f"enc{lvl}.W_x{gate}", (hid, in_w, 3, 3, 3)))
            spec.append((f"enc{lvl}.W_h{gate}", (hid, hid, 3, 3, 3)))
            spec.append((f"enc{lvl}.b_{gate}", (hid,)))
        spec.append((f"enc{lvl}.down.w", (hid, hid, 3, 3, 3)))
        spec.append((f"enc{lvl}.down.b", (hid,)))
        in_w = hid
    n_up = levels if full_res_flow else levels - 1
    prev = channels[-1]
    for j in range(n_up):
        skip = channels[levels - 1 - j]
        spec.append((f"dec{j}.w", (skip, prev + skip, 3, 3, 3)))
        spec.append((f"dec{j}.b", (skip,)))
        prev = skip
    spec.append(("flow.w", (3, prev, 3, 3, 3)))
    spec.append(("flow.b", (3,)))
    return spec


def init_params(levels: int, channels, seed: int, in_channels: int = 4,
                full_res_flow: bool = False) -> NetworkParams:
    """Gaussian fan-in init; He gain on the LeakyReLU conv stack, Xavier-like
    gain on the saturating gate kernels, zero flow head and biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    order = []
    for name, shape in param_spec(levels, channels, in_channels, full_res_flow):
        if name.startswith("flow.") or len(shape) == 1:
            data = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:]))
            gain = 1.0 if ".W_" in name else 2.0
            data = rng.normal(0.0, np.sqrt(gain / fan_in), size=shape).astype(np.float32)
        tensors[name] = Tensor(data, requires_grad=True)
        order.append(name)
    return NetworkParams(tensors, order)


def clstm_step(x: Tensor, h: Tensor, c: Tensor, params: NetworkParams, level: int):
    """One convolutional LSTM update.

    Gates: f, i, o through sigmoid, candidate c through tanh, each from a
    3x3x3 convolution of the input stacked with the previous hidden state.
    Returns (h_new, c_new).
    """
    if h.shape != c.shape:
        raise ShapeError(f"clstm_step: hidden/cell shapes differ: {h.shape} vs {c.shape}")
    if x.shape[1:] != h.shape[1:]:
        raise ShapeError(f"clstm_step: spatial mismatch {x.shape[1:]} vs {h.shape[1:]}")
    hid = h.shape[0]
    # one GEMM for all gates: stack gate kernels on the output axis and
    # the x/h kernels on the input axis
    w_x = ad.concat([params[f"enc{level}.W_x{g}"] for g in GATES], axis=0)
    w_h = ad.concat([params[f"enc{level}.W_h{g}"] for g in GATES], axis=0)
    w_all = ad.concat([w_x, w_h], axis=1)
    b_all = ad.concat([params[f"enc{level}.b_{g}"] for g in GATES], axis=0)
    z = ad.conv3d(ad.concat([x, h], axis=0), w_all, stride=1, bias=b_all)
    f = ad.sigmoid(ad.narrow(z, 0, 0, hid))
    i = ad.sigmoid(ad.narrow(z, 0, hid, hid))
    c_tilde = ad.tanh(ad.narrow(z, 0, 2 * hid, hid))
    o = ad.sigmoid(ad.narrow(z, 0, 3 * hid, hid))
    c_new = ad.add(ad.mul(f, c), ad.mul(i, c_tilde))
    h_new = ad.mul(o, ad.tanh(c_new))
    return h_new, c_new


def _crop_to(t: Tensor, extents) -> Tensor:
    """Trim trailing voxels so the spatial extents match (odd-size skips)."""
    if t.shape[1:] == tuple(extents):
        return t
    for axis, ext in enumerate(extents, start=1):
        if t.shape[axis] != ext:
            t = ad.narrow(t, axis, 0, ext)
    return t


class RecurrentState:
    """Hidden/cell tensors per encoder level, zero at the first step."""

    def __init__(self, levels: int):
        self.hc = [None] * levels

    def get(self, level: int, channels: int, extents):
        if self.hc[level] is None:
            zero_h = ad.zeros((channels, *extents))
            zero_c = ad.zeros((channels, *extents))
            self.hc[level] = (zero_h, zero_c)
        return self.hc[level]

    def put(self, level: int, h: Tensor, c: Tensor):
        self.hc[level] = (h, c)


def predict_velocity(x: Tensor, state: RecurrentState, params: NetworkParams,
                     levels: int, channels, leaky_alpha: float = 0.2,
                     full_res_flow: bool = False):
    """Run one recurrent step of the network on a [C,D,H,W] input.

    Returns (velocity [3,D,H,W] at full resolution, per-level hidden
    activations for diagnostics). Raises if any activation goes
    non-finite, naming the level.
    """
    full_extents = x.shape[1:]
    feat = x
    skips = []
    for lvl in range(levels):
        h_prev, c_prev = state.get(lvl, channels[lvl], feat.shape[1:])
        h, c = clstm_step(feat, h_prev, c_prev, params, lvl)
        if not np.isfinite(h.data).all():
            raise FloatingPointError(f"non-finite activations at encoder level {lvl}")
        state.put(lvl, h, c)
        skips.append(h)
        feat = ad.leaky_relu(
            ad.conv3d(h, params[f"enc{lvl}.down.w"], stride=2,
                      bias=params[f"enc{lvl}.down.b"]), leaky_alpha)
    dec = feat
    n_up = levels if full_res_flow else levels - 1
    for j in range(n_up):
        skip = skips[levels - 1 - j]
        dec = _crop_to(ad.upsample2x_trilinear(dec), skip.shape[1:])
        dec = ad.concat([dec, skip], axis=0)
        dec = ad.leaky_relu(
            ad.conv3d(dec, params[f"dec{j}.w"], stride=1, bias=params[f"dec{j}.b"]),
            leaky_alpha)
        if not np.isfinite(dec.data).all():
            raise FloatingPointError(f"non-finite activations at decoder level {j}")
    v = ad.conv3d(dec, params["flow.w"], stride=1, bias=params["flow.b"])
    if not full_res_flow:
        # velocities predicted at half resolution: upsample and rescale
        # so the voxel-unit magnitudes refer to the full grid
        v = ad.scale(_crop_to(ad.upsample2x_trilinear(v), full_extents), 2.0)
    return v, skips
