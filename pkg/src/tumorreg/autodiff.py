"""Reverse-mode automatic differentiation over dense float32 arrays.

Provides the differentiable primitives the registration network and its
losses are built from: 3D convolution, gated activations, trilinear
upsampling, displacement-field sampling, and spatial finite differences.
Everything runs on contiguous float32 numpy buffers; binary elementwise
ops require exactly equal shapes (scalars are the only broadcast).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


def _as_array(data) -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=DTYPE)
    if not np.issubdtype(arr.dtype, np.floating):
        raise TypeError(f"tensor data must be real-valued, got {arr.dtype}")
    return arr


class Tensor:
    """Dense array node in the autodiff graph.

    `data` is always a contiguous float32 ndarray. `grad` is populated
    (same shape, float32) by `backward` for every reachable tensor with
    `requires_grad` set. Tensors are treated as immutable once created.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward_fn = None

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad})"

    # -- operators -----------------------------------------------------------
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -float(other))

    def __rsub__(self, other):
        return shift(neg(self), float(other))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not a primitive; divide by a scalar")
        return scale(self, 1.0 / float(other))

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return tmean(self)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded tape."""
        Tape.trace(self).backprop(self)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPE), requires_grad=requires_grad)


def _make(data: np.ndarray, parents, backward_fn) -> Tensor:
    """Wrap an op result, recording graph edges only when grads are needed."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


class Tape:
    """Topologically ordered record of the primitives reaching a root tensor.

    Built by tracing parent links; the node list satisfies the invariant
    that every operation appears after all operations producing its inputs.
    """

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, ready = stack.pop()
            if ready:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def backprop(self, root: Tensor) -> None:
        if root.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {root.shape}")
        if not root.requires_grad:
            return
        root.grad = np.ones_like(root.data)
        for node in reversed(self.nodes):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)


def backward(loss: Tensor) -> None:
    """Populate grads of every requires_grad tensor reachable from `loss`."""
    loss.backward()


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------

def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _make(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return _make(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _make(a.data * b.data, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        a._accumulate(-g)

    return _make(-a.data, (a,), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    s = DTYPE(s)

    def bwd(g):
        a._accumulate(g * s)

    return _make(a.data * s, (a,), bwd)


def shift(a: Tensor, s: float) -> Tensor:
    def bwd(g):
        a._accumulate(g)

    return _make(a.data + DTYPE(s), (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    # overflow of exp(-x) saturates to 0 exactly, which is the right limit
    with np.errstate(over="ignore"):
        out = (1.0 / (1.0 + np.exp(-a.data))).astype(DTYPE)

    def bwd(g):
        a._accumulate(g * out * (1.0 - out))

    return _make(out, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bwd(g):
        a._accumulate(g * (1.0 - out * out))

    return _make(out, (a,), bwd)


def leaky_relu(a: Tensor, alpha: float = 0.2) -> Tensor:
    alpha = DTYPE(alpha)
    mask = a.data >= 0
    out = np.where(mask, a.data, a.data * alpha)

    def bwd(g):
        a._accumulate(np.where(mask, g, g * alpha))

    return _make(out, (a,), bwd)


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data

    def bwd(g):
        a._accumulate(-g * out * out)

    return _make(out, (a,), bwd)


def tsum(a: Tensor) -> Tensor:
    def bwd(g):
        a._accumulate(np.full_like(a.data, g.reshape(())))

    return _make(a.data.sum(dtype=DTYPE).reshape(()), (a,), bwd)


def tmean(a: Tensor) -> Tensor:
    inv_n = DTYPE(1.0 / a.size)

    def bwd(g):
        a._accumulate(np.full_like(a.data, g.reshape(()) * inv_n))

    return _make((a.data.sum(dtype=DTYPE) * inv_n).reshape(()), (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)

    def bwd(g):
        a._accumulate(g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(int(lo), int(hi))
                t._accumulate(g[tuple(sl)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def bwd(g):
        buf = np.zeros_like(a.data)
        buf[sl] = g
        a._accumulate(buf)

    return _make(np.ascontiguousarray(a.data[sl]), (a,), bwd)


# ---------------------------------------------------------------------------
# 3D convolution
# ---------------------------------------------------------------------------

def _im2col(xpad: np.ndarray, k: int, stride: int) -> np.ndarray:
    """[C, Dp, Hp, Wp] -> [C*k^3, N] column matrix of k-cubed patches."""
    win = sliding_window_view(xpad, (k, k, k), axis=(1, 2, 3))
    win = win[:, ::stride, ::stride, ::stride]
    c = xpad.shape[0]
    d, h, w = win.shape[1:4]
    cols = win.transpose(0, 4, 5, 6, 1, 2, 3).reshape(c * k * k * k, d * h * w)
    return np.ascontiguousarray(cols), (d, h, w)


def _col2im(cols: np.ndarray, c: int, k: int, stride: int, padded_shape, out_spatial) -> np.ndarray:
    """Adjoint of `_im2col`: scatter-add columns back into a padded buffer."""
    dp, hp, wp = padded_shape
    do, ho, wo = out_spatial
    buf = np.zeros((c, dp, hp, wp), dtype=DTYPE)
    patches = cols.reshape(c, k, k, k, do, ho, wo)
    for dz in range(k):
        for dy in range(k):
            for dx in range(k):
                buf[:,
                    dz:dz + stride * do:stride,
                    dy:dy + stride * ho:stride,
                    dx:dx + stride * wo:stride] += patches[:, dz, dy, dx]
    return buf


def conv3d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int | None = None,
           bias: Tensor | None = None) -> Tensor:
    """Dense 3D convolution (cross-correlation) with zero padding.

    x: [C_in, D, H, W]; kernel: [C_out, C_in, k, k, k], k odd; stride 1 or 2.
    Output spatial extent is floor((D + 2p - k)/stride) + 1 per axis.
    """
    if x.ndim != 4 or kernel.ndim != 5:
        raise ShapeError(f"conv3d: expected x[C,D,H,W] and kernel[Co,Ci,k,k,k], "
                         f"got {x.shape} and {kernel.shape}")
    c_out, c_in, k = kernel.shape[0], kernel.shape[1], kernel.shape[2]
    if kernel.shape[2:] != (k, k, k) or k % 2 == 0:
        raise ShapeError(f"conv3d: kernel must be odd and cubic, got {kernel.shape[2:]}")
    if x.shape[0] != c_in:
        raise ShapeError(f"conv3d: input has {x.shape[0]} channels, kernel expects {c_in}")
    if stride not in (1, 2):
        raise ShapeError(f"conv3d: stride must be 1 or 2, got {stride}")
    if padding is None:
        padding = (k - 1) // 2
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv3d: bias must have shape ({c_out},), got {bias.shape}")

    pad = ((0, 0), (padding, padding), (padding, padding), (padding, padding))
    xpad = np.pad(x.data, pad)
    cols, out_spatial = _im2col(xpad, k, stride)
    w2d = kernel.data.reshape(c_out, c_in * k * k * k)
    out = (w2d @ cols).reshape(c_out, *out_spatial)
    if bias is not None:
        out = out + bias.data[:, None, None, None]
    padded_shape = xpad.shape[1:]

    def bwd(g):
        g2d = g.reshape(c_out, -1)
        if kernel.requires_grad:
            xp = np.pad(x.data, pad)
            cols_b, _ = _im2col(xp, k, stride)
            kernel._accumulate((g2d @ cols_b.T).reshape(kernel.shape))
        if x.requires_grad:
            colsg = w2d.T @ g2d
            buf = _col2im(colsg, c_in, k, stride, padded_shape, out_spatial)
            if padding:
                buf = buf[:, padding:-padding, padding:-padding, padding:-padding]
            x._accumulate(np.ascontiguousarray(buf))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(1, 2, 3), dtype=DTYPE))

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, bwd)


# ---------------------------------------------------------------------------
# trilinear sampling
# ---------------------------------------------------------------------------

def _axis_setup(coord: np.ndarray, extent: int):
    """Clamp one coordinate axis and return (i0, i1, frac, interior_mask)."""
    inside = (coord > 0.0) & (coord < extent - 1)
    c = np.clip(coord, 0.0, extent - 1)
    i0 = np.floor(c).astype(np.int64)
    np.minimum(i0, extent - 2 if extent > 1 else 0, out=i0)
    f = (c - i0).astype(DTYPE)
    i1 = np.minimum(i0 + 1, extent - 1)
    return i0, i1, f, inside


def _tri_gather(flat: np.ndarray, d: int, h: int, w: int, setup):
    """Gather the 8 corner values around each sample point.

    flat: [C, D*H*W]; returns corners indexed [z][y][x] with z,y,x in {0,1}.
    """
    (iz0, iz1, fz, _), (iy0, iy1, fy, _), (ix0, ix1, fx, _) = setup
    idx = {}
    for zi, iz in ((0, iz0), (1, iz1)):
        for yi, iy in ((0, iy0), (1, iy1)):
            base = (iz * h + iy) * w
            for xi, ix in ((0, ix0), (1, ix1)):
                idx[zi, yi, xi] = base + ix
    return {key: np.take(flat, i, axis=1) for key, i in idx.items()}, (fz, fy, fx)


def _tri_interp(corners, fracs):
    fz, fy, fx = fracs
    c00 = corners[0, 0, 0] * (1.0 - fx) + corners[0, 0, 1] * fx
    c01 = corners[0, 1, 0] * (1.0 - fx) + corners[0, 1, 1] * fx
    c10 = corners[1, 0, 0] * (1.0 - fx) + corners[1, 0, 1] * fx
    c11 = corners[1, 1, 0] * (1.0 - fx) + corners[1, 1, 1] * fx
    c0 = c00 * (1.0 - fy) + c01 * fy
    c1 = c10 * (1.0 - fy) + c11 * fy
    return c0 * (1.0 - fz) + c1 * fz


def _sample_volume(vol: np.ndarray, zc: np.ndarray, yc: np.ndarray, xc: np.ndarray) -> np.ndarray:
    """Trilinear sample a [C,D,H,W] volume at flat voxel coordinates (non-diff)."""
    c, d, h, w = vol.shape
    setup = (_axis_setup(zc, d), _axis_setup(yc, h), _axis_setup(xc, w))
    corners, fracs = _tri_gather(vol.reshape(c, -1), d, h, w, setup)
    return _tri_interp(corners, fracs)


def grid_sample(volume: Tensor, disp: Tensor) -> Tensor:
    """Warp a volume by a displacement field: out(p) = volume(p + disp(p)).

    volume: [C, D, H, W]; disp: [3, D, H, W] in voxel units, components
    ordered (z, y, x) to match the spatial axes. Sample coordinates are
    clamped to the valid box, so the warp is zero-flux at the boundary.
    """
    if volume.ndim != 4 or disp.ndim != 4 or disp.shape[0] != 3:
        raise ShapeError(f"grid_sample: need volume[C,D,H,W] and disp[3,D,H,W], "
                         f"got {volume.shape} and {disp.shape}")
    if volume.shape[1:] != disp.shape[1:]:
        raise ShapeError(f"grid_sample: extent mismatch {volume.shape[1:]} vs {disp.shape[1:]}")
    c, d, h, w = volume.shape
    n = d * h * w
    coords = disp.data.reshape(3, n) + _base_grid(d, h, w)
    setup = (_axis_setup(coords[0], d), _axis_setup(coords[1], h), _axis_setup(coords[2], w))
    flat = volume.data.reshape(c, n)
    corners, fracs = _tri_gather(flat, d, h, w, setup)
    out = _tri_interp(corners, fracs).reshape(c, d, h, w)
    del setup, corners, fracs  # recomputed in backward; keep the graph lean

    def bwd(g):
        g2 = g.reshape(c, n)
        setup = (_axis_setup(coords[0], d), _axis_setup(coords[1], h), _axis_setup(coords[2], w))
        (iz0, iz1, fz, mz), (iy0, iy1, fy, my), (ix0, ix1, fx, mx) = setup
        wz = (1.0 - fz, fz)
        wy = (1.0 - fy, fy)
        wx = (1.0 - fx, fx)
        if volume.requires_grad:
            gv = np.zeros((c, n), dtype=DTYPE)
            for zi, iz in ((0, iz0), (1, iz1)):
                for yi, iy in ((0, iy0), (1, iy1)):
                    base_i = (iz * h + iy) * w
                    for xi, ix in ((0, ix0), (1, ix1)):
                        idx = base_i + ix
                        wgt = wz[zi] * wy[yi] * wx[xi]
                        for ch in range(c):
                            gv[ch] += np.bincount(idx, weights=g2[ch] * wgt,
                                                  minlength=n).astype(DTYPE)
            volume._accumulate(gv.reshape(volume.shape))
        if disp.requires_grad:
            co, _ = _tri_gather(volume.data.reshape(c, n), d, h, w, setup)

            def lerp2(a, b, f):
                return a * (1.0 - f) + b * f

            # d/dz: difference of the two (y,x)-bilinear planes, etc.
            dz = lerp2(lerp2(co[1, 0, 0], co[1, 0, 1], fx), lerp2(co[1, 1, 0], co[1, 1, 1], fx), fy) \
                - lerp2(lerp2(co[0, 0, 0], co[0, 0, 1], fx), lerp2(co[0, 1, 0], co[0, 1, 1], fx), fy)
            dy = lerp2(lerp2(co[0, 1, 0], co[0, 1, 1], fx), lerp2(co[1, 1, 0], co[1, 1, 1], fx), fz) \
                - lerp2(lerp2(co[0, 0, 0], co[0, 0, 1], fx), lerp2(co[1, 0, 0], co[1, 0, 1], fx), fz)
            dx = lerp2(lerp2(co[0, 0, 1], co[0, 1, 1], fy), lerp2(co[1, 0, 1], co[1, 1, 1], fy), fz) \
                - lerp2(lerp2(co[0, 0, 0], co[0, 1, 0], fy), lerp2(co[1, 0, 0], co[1, 1, 0], fy), fz)
            gd = np.empty((3, n), dtype=DTYPE)
            gd[0] = (g2 * dz).sum(axis=0) * mz
            gd[1] = (g2 * dy).sum(axis=0) * my
            gd[2] = (g2 * dx).sum(axis=0) * mx
            disp._accumulate(gd.reshape(disp.shape))

    return _make(out, (volume, disp), bwd)


_GRID_CACHE: dict = {}


def _base_grid(d: int, h: int, w: int) -> np.ndarray:
    key = (d, h, w)
    grid = _GRID_CACHE.get(key)
    if grid is None:
        zz, yy, xx = np.meshgrid(np.arange(d, dtype=DTYPE), np.arange(h, dtype=DTYPE),
                                 np.arange(w, dtype=DTYPE), indexing="ij")
        grid = np.stack([zz.ravel(), yy.ravel(), xx.ravel()])
        _GRID_CACHE[key] = grid
    return grid


# ---------------------------------------------------------------------------
# trilinear 2x upsampling
# ---------------------------------------------------------------------------

def _up_axis(x: np.ndarray, axis: int) -> np.ndarray:
    """Double one axis; output center o maps to input coordinate o/2."""
    n = x.shape[axis]
    lo = x
    hi_idx = np.minimum(np.arange(n) + 1, n - 1)
    hi = np.take(x, hi_idx, axis=axis)
    mid = (lo + hi) * DTYPE(0.5)
    out_shape = list(x.shape)
    out_shape[axis] = 2 * n
    out = np.empty(out_shape, dtype=DTYPE)
    sl_even = [slice(None)] * x.ndim
    sl_even[axis] = slice(0, None, 2)
    sl_odd = [slice(None)] * x.ndim
    sl_odd[axis] = slice(1, None, 2)
    out[tuple(sl_even)] = lo
    out[tuple(sl_odd)] = mid
    return out


def _up_axis_adjoint(g: np.ndarray, axis: int, n: int) -> np.ndarray:
    sl_even = [slice(None)] * g.ndim
    sl_even[axis] = slice(0, None, 2)
    sl_odd = [slice(None)] * g.ndim
    sl_odd[axis] = slice(1, None, 2)
    ge = g[tuple(sl_even)]
    go = g[tuple(sl_odd)] * DTYPE(0.5)
    out = ge.copy()
    out += go  # odd output o=2i+1 reads input i ...
    # ... and input i+1 (clamped to the last sample)
    sl_at = [slice(None)] * g.ndim
    sl_at[axis] = slice(1, None)
    sl_from = [slice(None)] * g.ndim
    sl_from[axis] = slice(0, n - 1)
    out[tuple(sl_at)] += go[tuple(sl_from)]
    sl_last = [slice(None)] * g.ndim
    sl_last[axis] = slice(n - 1, n)
    sl_glast = [slice(None)] * g.ndim
    sl_glast[axis] = slice(n - 1, n)
    out[tuple(sl_last)] += go[tuple(sl_glast)]
    return out


def upsample2x_trilinear(x: Tensor) -> Tensor:
    """Trilinear x2 upsampling of [C, D, H, W] to [C, 2D, 2H, 2W].

    Voxel centers sit at integer coordinates; output center o samples the
    input at o/2, clamped at the top face.
    """
    if x.ndim != 4:
        raise ShapeError(f"upsample2x_trilinear: expected [C,D,H,W], got {x.shape}")
    d, h, w = x.shape[1:]
    out = _up_axis(_up_axis(_up_axis(x.data, 1), 2), 3)

    def bwd(g):
        g = _up_axis_adjoint(g, 3, w)
        g = _up_axis_adjoint(g, 2, h)
        g = _up_axis_adjoint(g, 1, d)
        x._accumulate(g)

    return _make(out, (x,), bwd)


# ---------------------------------------------------------------------------
# spatial finite differences
# ---------------------------------------------------------------------------

def _diff_axis(x: np.ndarray, axis: int) -> np.ndarray:
    """Central differences in the interior, one-sided at the two faces."""
    out = np.empty_like(x)
    n = x.shape[axis]
    sl = lambda s: tuple(s if i == axis else slice(None) for i in range(x.ndim))  # noqa: E731
    if n == 1:
        out[...] = 0.0
        return out
    out[sl(slice(1, n - 1))] = (x[sl(slice(2, n))] - x[sl(slice(0, n - 2))]) * DTYPE(0.5)
    out[sl(slice(0, 1))] = x[sl(slice(1, 2))] - x[sl(slice(0, 1))]
    out[sl(slice(n - 1, n))] = x[sl(slice(n - 1, n))] - x[sl(slice(n - 2, n - 1))]
    return out


def _diff_axis_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    out = np.zeros_like(g)
    n = g.shape[axis]
    sl = lambda s: tuple(s if i == axis else slice(None) for i in range(g.ndim))  # noqa: E731
    if n == 1:
        return out
    gi = g[sl(slice(1, n - 1))] * DTYPE(0.5)
    out[sl(slice(2, n))] += gi
    out[sl(slice(0, n - 2))] -= gi
    out[sl(slice(1, 2))] += g[sl(slice(0, 1))]
    out[sl(slice(0, 1))] -= g[sl(slice(0, 1))]
    out[sl(slice(n - 1, n))] += g[sl(slice(n - 1, n))]
    out[sl(slice(n - 2, n - 1))] -= g[sl(slice(n - 1, n))]
    return out


def spatial_gradient(x: Tensor) -> Tensor:
    """Per-channel spatial derivatives of [C, D, H, W] as [C, 3, D, H, W].

    out[c, a] = d x[c] / d axis_a with unit voxel spacing; central stencil
    in the interior, first-order one-sided at the faces.
    """
    if x.ndim != 4:
        raise ShapeError(f"spatial_gradient: expected [C,D,H,W], got {x.shape}")
    grads = np.stack([_diff_axis(x.data, 1 + a) for a in range(3)], axis=1)

    def bwd(g):
        acc = np.zeros_like(x.data)
        for a in range(3):
            acc += _diff_axis_adjoint(np.ascontiguousarray(g[:, a]), 1 + a)
        x._accumulate(acc)

    return _make(grads, (x,), bwd)
