"""Array operators with optional reverse-mode recording.

Every operator takes plain numpy arrays. When a :class:`Tape` is passed the
operator appends a backward closure; :meth:`Tape.backward` then walks the
records in reverse and returns gradients keyed by array identity.

Tensors are batched: volumes are ``(N, C, Z, Y, X)`` and BEV planes are
``(N, C, Y, X)``. Convolutions accumulate in float64 and cast the result
back to the input dtype, so the dense and event-driven paths agree to the
last bit in almost all cases.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .energy import OpLedger
from .lif import LIFParams, surrogate_forward, surrogate_grad


@dataclass
class Record:
    kind: str
    inputs: tuple
    output: np.ndarray
    backward: Callable


class Gradients:
    def __init__(self, grads: dict[int, np.ndarray], keep: list):
        self._grads = grads
        self._keep = keep

    def of(self, array: np.ndarray):
        return self._grads.get(id(array))

    def __contains__(self, array):
        return id(array) in self._grads


class Tape:
    """Ordered record of differentiable operations for one forward pass."""

    def __init__(self):
        self.records: list[Record] = []

    def record(self, kind, inputs, output, backward):
        self.records.append(Record(kind, tuple(inputs), output, backward))

    def __len__(self):
        return len(self.records)

    def backward(self, output: np.ndarray, grad=None) -> Gradients:
        grads = {id(output): np.ones_like(output) if grad is None else np.asarray(grad)}
        for rec in reversed(self.records):
            g = grads.get(id(rec.output))
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if inp is None or gi is None:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return Gradients(grads, [r.inputs for r in self.records])


def _triple(v):
    if np.isscalar(v):
        return (int(v),) * 3
    return tuple(int(a) for a in v)


def _out_len(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def valid_tap_counts(n_in: int, k: int, stride: int, pad: int, n_out: int) -> np.ndarray:
    """Per input coordinate, how many kernel taps land on a valid output."""
    num = np.arange(n_in)[:, None] + pad - np.arange(k)[None, :]
    ok = (num >= 0) & (num % stride == 0) & (num // stride < n_out)
    return ok.sum(axis=1)


def _event_count(x, k, stride, pad, out_spatial, cout):
    """Accumulations touching nonzero inputs, over all batch items."""
    nz = np.nonzero(x)
    if len(nz[0]) == 0:
        return 0
    cz = valid_tap_counts(x.shape[2], k[0], stride[0], pad[0], out_spatial[0])
    cy = valid_tap_counts(x.shape[3], k[1], stride[1], pad[1], out_spatial[1])
    cx = valid_tap_counts(x.shape[4], k[2], stride[2], pad[2], out_spatial[2])
    return int((cz[nz[2]] * cy[nz[3]] * cx[nz[4]]).sum()) * cout


# --------------------------------------------------------------------------
# Convolution
# --------------------------------------------------------------------------


def conv3d(x, w, b=None, stride=1, padding=1, *, tape=None, ledger: OpLedger | None = None, layer="conv"):
    """Dense zero-padded 3D cross-correlation.

    ``x`` is ``(N, Cin, Z, Y, X)``; ``w`` is ``(Cout, Cin, kz, ky, kx)``.
    """
    stride, padding = _triple(stride), _triple(padding)
    n, cin, *spatial = x.shape
    cout, wcin, *k = w.shape
    if wcin != cin:
        raise ValueError(f"{layer}: input has {cin} channels, kernel expects {wcin}")
    out_sp = [_out_len(spatial[i], k[i], stride[i], padding[i]) for i in range(3)]
    if min(out_sp) < 1:
        raise ValueError(f"{layer}: kernel {tuple(k)} does not fit input {tuple(spatial)}")
    dtype = np.result_type(x.dtype, w.dtype)

    xp = np.pad(
        x.astype(np.float64).transpose(0, 2, 3, 4, 1),
        ((0, 0), (padding[0],) * 2, (padding[1],) * 2, (padding[2],) * 2, (0, 0)),
    )
    w64 = w.astype(np.float64)
    zo, yo, xo = out_sp
    sz, sy, sx = stride

    def slab(a, bb, c):
        return xp[:, a:a + sz * (zo - 1) + 1:sz, bb:bb + sy * (yo - 1) + 1:sy, c:c + sx * (xo - 1) + 1:sx, :]

    acc = np.zeros((n, zo, yo, xo, cout))
    for a in range(k[0]):
        for bb in range(k[1]):
            for c in range(k[2]):
                acc += slab(a, bb, c) @ w64[:, :, a, bb, c].T
    if b is not None:
        acc += b.astype(np.float64)
    out = np.ascontiguousarray(acc.transpose(0, 4, 1, 2, 3)).astype(dtype)

    if ledger is not None:
        if ledger.mode == "dense":
            macs = n * cout * zo * yo * xo * cin * int(np.prod(k))
        else:
            macs = _event_count(x, k, stride, padding, out_sp, cout)
        ledger.record(layer, macs=macs)

    if tape is not None:
        def backward(g):
            g_cl = g.astype(np.float64).transpose(0, 2, 3, 4, 1)
            gw = np.zeros_like(w64)
            gxp = np.zeros_like(xp)
            for a in range(k[0]):
                for bb in range(k[1]):
                    for c in range(k[2]):
                        s = slab(a, bb, c)
                        gw[:, :, a, bb, c] = np.tensordot(g_cl, s, axes=([0, 1, 2, 3], [0, 1, 2, 3]))
                        gxp[:, a:a + sz * (zo - 1) + 1:sz, bb:bb + sy * (yo - 1) + 1:sy,
                            c:c + sx * (xo - 1) + 1:sx, :] += g_cl @ w64[:, :, a, bb, c]
            pz, py, px = padding
            gx = gxp[:, pz:pz + spatial[0], py:py + spatial[1], px:px + spatial[2], :]
            gx = np.ascontiguousarray(gx.transpose(0, 4, 1, 2, 3)).astype(x.dtype)
            gb = None if b is None else g.astype(np.float64).sum(axis=(0, 2, 3, 4)).astype(b.dtype)
            return gx, gw.astype(w.dtype), gb

        tape.record(f"conv3d:{layer}", (x, w, b), out, backward)
    return out


def is_binary(x) -> bool:
    return bool(np.all((x == 0) | (x == 1)))


def event_conv3d(x, w, b=None, stride=1, padding=1, *, ledger: OpLedger | None = None, layer="conv",
                 backend=None, check=True):
    """Spike-gated 3D convolution.

    Walks the spike events of ``x`` and adds the matching kernel column to
    every output position each event reaches. Gives the same result as
    :func:`conv3d` and records one AC per (event, valid tap, out channel).
    """
    if check and not is_binary(x):
        raise ValueError("event-driven path requires spikes")
    stride, padding = _triple(stride), _triple(padding)
    n, cin, *spatial = x.shape
    cout, wcin, *k = w.shape
    if wcin != cin:
        raise ValueError(f"{layer}: input has {cin} channels, kernel expects {wcin}")
    out_sp = [_out_len(spatial[i], k[i], stride[i], padding[i]) for i in range(3)]
    if min(out_sp) < 1:
        raise ValueError(f"{layer}: kernel {tuple(k)} does not fit input {tuple(spatial)}")
    dtype = np.result_type(x.dtype, w.dtype)
    wt = np.ascontiguousarray(w.astype(np.float64).transpose(1, 2, 3, 4, 0))
    out = np.empty((n, cout, *out_sp), dtype=dtype)
    total = 0
    for i in range(n):
        events = np.ascontiguousarray(np.argwhere(x[i]), dtype=np.int64)
        acc = np.zeros((*out_sp, cout))
        total += kernels.event_conv3d(events, wt, acc, stride, padding, backend=backend)
        if b is not None:
            acc += b.astype(np.float64)
        out[i] = acc.transpose(3, 0, 1, 2)
    if ledger is not None:
        ledger.record(layer, acs=total)
    return out


def conv_transpose2d(x, w, b=None, *, tape=None, ledger: OpLedger | None = None, layer="upsample"):
    """Transposed 2D convolution with kernel size equal to stride.

    ``x`` is ``(N, Cin, Y, X)``, ``w`` is ``(Cin, Cout, f, f)``; the output
    is ``(N, Cout, Y*f, X*f)``. Kernel windows never overlap.
    """
    n, cin, yi, xi = x.shape
    wcin, cout, f, f2 = w.shape
    if wcin != cin or f != f2:
        raise ValueError(f"{layer}: weight {w.shape} incompatible with input {x.shape}")
    dtype = np.result_type(x.dtype, w.dtype)
    x64, w64 = x.astype(np.float64), w.astype(np.float64)
    t = np.tensordot(x64, w64, axes=([1], [0]))  # (N, Y, X, Cout, f, f)
    acc = t.transpose(0, 3, 1, 4, 2, 5).reshape(n, cout, yi * f, xi * f)
    if b is not None:
        acc = acc + b.astype(np.float64)[None, :, None, None]
    out = np.ascontiguousarray(acc).astype(dtype)

    if ledger is not None:
        if ledger.mode == "dense":
            ledger.record(layer, macs=n * cin * yi * xi * cout * f * f)
        else:
            ledger.record(layer, macs=int(np.count_nonzero(x)) * cout * f * f)

    if tape is not None:
        def backward(g):
            g6 = g.astype(np.float64).reshape(n, cout, yi, f, xi, f)
            gx = np.tensordot(g6, w64, axes=([1, 3, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
            gw = np.tensordot(x64, g6, axes=([0, 2, 3], [0, 2, 4]))
            gb = None if b is None else g.astype(np.float64).sum(axis=(0, 2, 3)).astype(b.dtype)
            return np.ascontiguousarray(gx).astype(x.dtype), gw.astype(w.dtype), gb

        tape.record(f"conv_transpose2d:{layer}", (x, w, b), out, backward)
    return out


# --------------------------------------------------------------------------
# Normalization and activations
# --------------------------------------------------------------------------


def batchnorm(x, gamma, beta, running_mean, running_var, *, training=False, momentum=0.1, eps=1e-5, tape=None):
    """Per-channel batch norm over all but the channel axis.

    In training mode batch statistics are used and the running buffers are
    updated in place; otherwise the running statistics give an affine map.
    """
    axes = (0,) + tuple(range(2, x.ndim))
    shape = (1, -1) + (1,) * (x.ndim - 2)
    x64 = x.astype(np.float64)
    if training:
        m = x.size // x.shape[1]
        mean = x64.mean(axis=axes)
        var = x64.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mean.astype(running_mean.dtype)
        running_var *= 1 - momentum
        running_var += momentum * (var * m / max(m - 1, 1)).astype(running_var.dtype)
    else:
        mean = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x64 - mean.reshape(shape)) * inv_std.reshape(shape)
    out = (xhat * gamma.astype(np.float64).reshape(shape) + beta.astype(np.float64).reshape(shape)).astype(x.dtype)

    if tape is not None:
        def backward(g):
            g64 = g.astype(np.float64)
            ggamma = (g64 * xhat).sum(axis=axes)
            gbeta = g64.sum(axis=axes)
            dxhat = g64 * gamma.astype(np.float64).reshape(shape)
            if training:
                m = x.size // x.shape[1]
                gx = (inv_std.reshape(shape) / m) * (
                    m * dxhat
                    - dxhat.sum(axis=axes).reshape(shape)
                    - xhat * (dxhat * xhat).sum(axis=axes).reshape(shape)
                )
            else:
                gx = dxhat * inv_std.reshape(shape)
            return gx.astype(x.dtype), ggamma.astype(gamma.dtype), gbeta.astype(beta.dtype)

        tape.record("batchnorm", (x, gamma, beta), out, backward)
    return out


def relu(x, *, tape=None):
    out = np.maximum(x, 0).astype(x.dtype)
    if tape is not None:
        tape.record("relu", (x,), out, lambda g: ((g * (x > 0)).astype(x.dtype),))
    return out


def spike(u, params: LIFParams = LIFParams(), *, tape=None):
    """Hard threshold forward, surrogate derivative backward."""
    out = (u >= params.v_th).astype(u.dtype)
    if tape is not None:
        tape.record("spike", (u,), out, lambda g: ((g * surrogate_grad(u, params)).astype(u.dtype),))
    return out


def soft_spike(u, params: LIFParams = LIFParams(), *, tape=None):
    """Surrogate function used as the forward map (gradient checks)."""
    out = surrogate_forward(u, params).astype(u.dtype)
    if tape is not None:
        tape.record("soft_spike", (u,), out, lambda g: ((g * surrogate_grad(u, params)).astype(u.dtype),))
    return out


# --------------------------------------------------------------------------
# Shape plumbing
# --------------------------------------------------------------------------


def reshape(x, shape, *, tape=None):
    out = x.reshape(shape).copy()
    if tape is not None:
        tape.record("reshape", (x,), out, lambda g: (g.reshape(x.shape),))
    return out


def concat(xs: Sequence[np.ndarray], axis=1, *, tape=None):
    out = np.concatenate(xs, axis=axis)
    if tape is not None:
        bounds = np.cumsum([0] + [a.shape[axis] for a in xs])

        def backward(g):
            return tuple(
                np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs))
            )

        tape.record("concat", tuple(xs), out, backward)
    return out


def transpose(x, axes, *, tape=None):
    out = np.ascontiguousarray(x.transpose(axes))
    if tape is not None:
        inv = np.argsort(axes)
        tape.record("transpose", (x,), out, lambda g: (np.ascontiguousarray(g.transpose(inv)),))
    return out


def index(x, key, *, tape=None):
    """``x[key]`` as a new array; gradients scatter-add back."""
    out = np.array(x[key], copy=True)
    if tape is not None:
        def backward(g):
            full = np.zeros_like(x)
            np.add.at(full, key, g)
            return (full,)

        tape.record("index", (x,), out, backward)
    return out


def add(a, b, *, tape=None):
    out = np.asarray(a + b)
    if tape is not None:
        tape.record("add", (a, b), out, lambda g: (g, g))
    return out


def scale(x, factor: float, *, tape=None):
    out = np.asarray(x * factor).astype(x.dtype)
    if tape is not None:
        tape.record("scale", (x,), out, lambda g: ((g * factor).astype(x.dtype),))
    return out
