"""Differentiable operations over :class:`Tensor`.

Image tensors are laid out ``[..., C, H, W]``; spectral operations act on the
last two axes and complex values travel as (real, imaginary) tensor pairs.
The forward DFT is unscaled and the inverse carries 1/(H*W). Channel
reductions are written as explicit loops so results do not depend on the
batch size.
"""

from __future__ import annotations

import numpy as np
import scipy.fft as sfft

from ..optics import fft_workers
from .tensor import Tensor, record

__all__ = [
    "add", "sub", "mul", "scale", "add_scalar", "abs", "complex_abs", "sum", "mean",
    "take_channel", "fft2", "ifft2", "spectral_truncate", "spectral_pad",
    "spaf_weight_mul", "spectral_mix", "conv1x1", "prelu", "window_indices",
]

# every operation that records on the tape
DIFFERENTIABLE = tuple(name for name in __all__ if name != "window_indices")


def _zeros_if_none(g, like):
    return np.zeros_like(like) if g is None else g


def _complex(re: np.ndarray, im: np.ndarray | None) -> np.ndarray:
    dtype = np.result_type(re.dtype, np.complex64)
    z = np.empty(re.shape, dtype=dtype)
    z.real = re
    z.imag = 0 if im is None else im
    return z


def _check_same(x: Tensor, y: Tensor, op: str) -> None:
    if x.shape != y.shape:
        raise ValueError(f"{op}: shape mismatch {x.shape} vs {y.shape}")


def add(x: Tensor, y: Tensor) -> Tensor:
    _check_same(x, y, "add")
    out = Tensor(x.value + y.value)
    record("add", (x, y), (out,), lambda g: (g[0], g[0]))
    return out


def sub(x: Tensor, y: Tensor) -> Tensor:
    _check_same(x, y, "sub")
    out = Tensor(x.value - y.value)
    record("sub", (x, y), (out,), lambda g: (g[0], -g[0]))
    return out


def mul(x: Tensor, y: Tensor) -> Tensor:
    _check_same(x, y, "mul")
    xv, yv = x.value, y.value
    out = Tensor(xv * yv)
    record("mul", (x, y), (out,), lambda g: (g[0] * yv, g[0] * xv))
    return out


def scale(x: Tensor, c: float) -> Tensor:
    out = Tensor(x.value * c)
    record("scale", (x,), (out,), lambda g: (g[0] * c,))
    return out


def add_scalar(x: Tensor, c: float) -> Tensor:
    out = Tensor(x.value + c)
    record("add_scalar", (x,), (out,), lambda g: (g[0],))
    return out


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    xv = x.value
    out = Tensor(np.abs(xv))
    record("abs", (x,), (out,), lambda g: (g[0] * np.sign(xv),))
    return out


def complex_abs(re: Tensor, im: Tensor) -> Tensor:
    """Elementwise modulus sqrt(re^2 + im^2); the subgradient at 0 is taken as 0."""
    _check_same(re, im, "complex_abs")
    r = np.hypot(re.value, im.value)
    out = Tensor(r)

    def vjp(g):
        safe = np.where(r > 0, r, 1)
        w = np.where(r > 0, g[0] / safe, 0)
        return w * re.value, w * im.value

    record("complex_abs", (re, im), (out,), vjp)
    return out


def sum(x: Tensor) -> Tensor:  # noqa: A001
    shape, dtype = x.shape, x.dtype
    out = Tensor(np.asarray(x.value.sum(), dtype=dtype))
    record("sum", (x,), (out,), lambda g: (np.broadcast_to(g[0], shape).astype(dtype),))
    return out


def mean(x: Tensor) -> Tensor:
    shape, dtype, n = x.shape, x.dtype, x.size
    out = Tensor(np.asarray(x.value.mean(), dtype=dtype))
    record("mean", (x,), (out,), lambda g: (np.broadcast_to(g[0] / n, shape).astype(dtype),))
    return out


def take_channel(x: Tensor, index: int) -> Tensor:
    """Select channel ``index`` of a ``[..., C, H, W]`` tensor, giving ``[..., H, W]``."""
    xv = x.value
    out = Tensor(xv[..., index, :, :].copy())

    def vjp(g):
        gx = np.zeros_like(xv)
        gx[..., index, :, :] = g[0]
        return (gx,)

    record("take_channel", (x,), (out,), vjp)
    return out


def fft2(re: Tensor, im: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Unscaled 2D DFT over the last two axes. ``im=None`` means a real input."""
    if im is not None:
        _check_same(re, im, "fft2")
    spec = sfft.fft2(re.value if im is None else _complex(re.value, im.value), workers=fft_workers())
    out_re, out_im = Tensor(spec.real.copy()), Tensor(spec.imag.copy())
    n = re.shape[-1] * re.shape[-2]

    def vjp(g):
        gr = _zeros_if_none(g[0], out_re.value)
        gi = _zeros_if_none(g[1], out_im.value)
        back = sfft.ifft2(_complex(gr, gi), workers=fft_workers()) * n
        return back.real.copy(), (None if im is None else back.imag.copy())

    record("fft2", (re, im), (out_re, out_im), vjp)
    return out_re, out_im


def ifft2(re: Tensor, im: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Inverse 2D DFT (scaled by 1/(H*W)) over the last two axes."""
    if im is not None:
        _check_same(re, im, "ifft2")
    sig = sfft.ifft2(_complex(re.value, None if im is None else im.value), workers=fft_workers())
    out_re, out_im = Tensor(sig.real.copy()), Tensor(sig.imag.copy())
    n = re.shape[-1] * re.shape[-2]

    def vjp(g):
        gr = _zeros_if_none(g[0], out_re.value)
        gi = _zeros_if_none(g[1], out_im.value)
        back = sfft.fft2(_complex(gr, gi), workers=fft_workers()) / n
        return back.real.copy(), (None if im is None else back.imag.copy())

    record("ifft2", (re, im), (out_re, out_im), vjp)
    return out_re, out_im


def window_indices(n: int, k: int) -> np.ndarray:
    """Wrapped DFT indices of frequencies -k..k in ascending order."""
    if k < 0 or 2 * k + 1 > n:
        raise ValueError(f"half window {k} does not fit an axis of length {n}")
    return np.r_[n - k:n, 0:k + 1] if k > 0 else np.array([0])


def _truncate(x: np.ndarray, k: int) -> np.ndarray:
    h, w = x.shape[-2:]
    ih, iw = window_indices(h, k), window_indices(w, k)
    return x[..., ih[:, None], iw[None, :]]


def _pad(x: np.ndarray, h: int, w: int) -> np.ndarray:
    kk = x.shape[-1]
    if x.shape[-2] != kk or kk % 2 != 1:
        raise ValueError(f"expected a centered (2k+1)x(2k+1) window, got {x.shape[-2:]}")
    k = (kk - 1) // 2
    ih, iw = window_indices(h, k), window_indices(w, k)
    out = np.zeros(x.shape[:-2] + (h, w), dtype=x.dtype)
    out[..., ih[:, None], iw[None, :]] = x
    return out


def spectral_truncate(re: Tensor, im: Tensor, k: int) -> tuple[Tensor, Tensor]:
    """Keep the (2k+1)^2 lowest frequencies, reordered so DC sits at the window center."""
    _check_same(re, im, "spectral_truncate")
    h, w = re.shape[-2:]
    out_re, out_im = Tensor(_truncate(re.value, k)), Tensor(_truncate(im.value, k))

    def vjp(g):
        gr = _zeros_if_none(g[0], out_re.value)
        gi = _zeros_if_none(g[1], out_im.value)
        return _pad(gr, h, w), _pad(gi, h, w)

    record("spectral_truncate", (re, im), (out_re, out_im), vjp)
    return out_re, out_im


def spectral_pad(re: Tensor, im: Tensor, h: int, w: int) -> tuple[Tensor, Tensor]:
    """Zero-fill a centered window back to a full ``h`` x ``w`` spectrum (adjoint of truncation)."""
    _check_same(re, im, "spectral_pad")
    k = (re.shape[-1] - 1) // 2
    out_re, out_im = Tensor(_pad(re.value, h, w)), Tensor(_pad(im.value, h, w))

    def vjp(g):
        gr = _zeros_if_none(g[0], out_re.value)
        gi = _zeros_if_none(g[1], out_im.value)
        return _truncate(gr, k), _truncate(gi, k)

    record("spectral_pad", (re, im), (out_re, out_im), vjp)
    return out_re, out_im


def _channel_sum(x: np.ndarray) -> np.ndarray:
    acc = x[..., 0:1, :, :].copy()
    for i in range(1, x.shape[-3]):
        acc += x[..., i:i + 1, :, :]
    return acc


def _batch_sum(x: np.ndarray, keep: int) -> np.ndarray:
    """Sum over all leading axes, keeping the trailing ``keep`` axes."""
    lead = x.ndim - keep
    return x.sum(axis=tuple(range(lead))) if lead > 0 else x


def spaf_weight_mul(re: Tensor, im: Tensor, w: Tensor, w_im: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Shrunk spectral transform: out_j = W'_j * sum_i F_i over a ``[..., c, K, K]`` window.

    ``w`` has shape ``[c, K, K]``; ``w_im`` optionally makes the weight complex.
    """
    _check_same(re, im, "spaf_weight_mul")
    if re.shape[-3:] != w.shape:
        raise ValueError(f"spaf_weight_mul: window {re.shape[-3:]} does not match weight {w.shape}")
    if w_im is not None:
        _check_same(w, w_im, "spaf_weight_mul")
    s_re, s_im = _channel_sum(re.value), _channel_sum(im.value)
    wv = w.value
    wi = None if w_im is None else w_im.value
    o_re, o_im = wv * s_re, wv * s_im
    if wi is not None:
        o_re = o_re - wi * s_im
        o_im = o_im + wi * s_re
    out_re, out_im = Tensor(o_re), Tensor(o_im)

    def vjp(g):
        gr = _zeros_if_none(g[0], o_re)
        gi = _zeros_if_none(g[1], o_im)
        ds_re = _channel_sum(gr * wv)
        ds_im = _channel_sum(gi * wv)
        if wi is not None:
            ds_re = ds_re + _channel_sum(gi * wi)
            ds_im = ds_im - _channel_sum(gr * wi)
        g_re = np.broadcast_to(ds_re, re.shape).copy()
        g_im = np.broadcast_to(ds_im, im.shape).copy()
        gw = _batch_sum(gr * s_re + gi * s_im, 3)
        gwi = None if wi is None else _batch_sum(gi * s_re - gr * s_im, 3)
        return g_re, g_im, gw, gwi

    record("spaf_weight_mul", (re, im, w, w_im), (out_re, out_im), vjp)
    return out_re, out_im


def spectral_mix(re: Tensor, im: Tensor, w: Tensor, w_im: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Full spectral transform: out_j = sum_i W_{i,j} * F_i with ``w`` of shape ``[c, c, K, K]``."""
    _check_same(re, im, "spectral_mix")
    c = re.shape[-3]
    if w.shape != (c, c) + re.shape[-2:]:
        raise ValueError(f"spectral_mix: weight {w.shape} incompatible with window {re.shape[-3:]}")
    if w_im is not None:
        _check_same(w, w_im, "spectral_mix")
    rv, iv, wv = re.value, im.value, w.value
    wi = None if w_im is None else w_im.value
    o_re = np.zeros(rv.shape, dtype=np.result_type(rv, wv))
    o_im = np.zeros_like(o_re)
    for i in range(c):
        o_re += wv[i] * rv[..., i:i + 1, :, :]
        o_im += wv[i] * iv[..., i:i + 1, :, :]
        if wi is not None:
            o_re -= wi[i] * iv[..., i:i + 1, :, :]
            o_im += wi[i] * rv[..., i:i + 1, :, :]
    out_re, out_im = Tensor(o_re), Tensor(o_im)

    def vjp(g):
        gr = _zeros_if_none(g[0], o_re)
        gi = _zeros_if_none(g[1], o_im)
        g_re = np.einsum("ijuv,...juv->...iuv", wv, gr)
        g_im = np.einsum("ijuv,...juv->...iuv", wv, gi)
        gw = _einsum_b("bjuv,biuv->ijuv", gr, rv) + _einsum_b("bjuv,biuv->ijuv", gi, iv)
        gwi = None
        if wi is not None:
            g_re = g_re + np.einsum("ijuv,...juv->...iuv", wi, gi)
            g_im = g_im - np.einsum("ijuv,...juv->...iuv", wi, gr)
            gwi = _einsum_b("bjuv,biuv->ijuv", gi, rv) - _einsum_b("bjuv,biuv->ijuv", gr, iv)
        return g_re, g_im, gw, gwi

    record("spectral_mix", (re, im, w, w_im), (out_re, out_im), vjp)
    return out_re, out_im


def _einsum_b(spec: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """einsum over operands whose leading batch axes are flattened into one axis ``b``."""
    return np.einsum(spec, a.reshape((-1,) + a.shape[-3:]), b.reshape((-1,) + b.shape[-3:]))


def conv1x1(x: Tensor, k: Tensor, b: Tensor | None = None) -> Tensor:
    """Pointwise channel mixing: y[..., o, :, :] = b[o] + sum_c k[o, c] * x[..., c, :, :]."""
    cout, cin = k.shape
    if x.shape[-3] != cin:
        raise ValueError(f"conv1x1: input has {x.shape[-3]} channels, kernel expects {cin}")
    if b is not None and b.shape != (cout,):
        raise ValueError(f"conv1x1: bias shape {b.shape} != ({cout},)")
    xv, kv = x.value, k.value
    out_shape = xv.shape[:-3] + (cout,) + xv.shape[-2:]
    y = np.zeros(out_shape, dtype=np.result_type(xv, kv))
    if b is not None:
        y += b.value[:, None, None]
    for c in range(cin):
        y += kv[:, c, None, None] * xv[..., c:c + 1, :, :]
    out = Tensor(y)

    def vjp(g):
        go = g[0]
        gx = np.einsum("oc,...ohw->...chw", kv, go)
        gk = _einsum_b("bohw,bchw->oc", go, xv)
        gb = None if b is None else _batch_sum(go, 3).sum(axis=(-2, -1))
        return gx, gk, gb

    record("conv1x1", (x, k, b), (out,), vjp)
    return out


def prelu_values(xv: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Untracked PReLU over axis -3.

    max(x, 0) + a * min(x, 0) equals the select exactly but has no
    data-dependent branches, which matters on mixed-sign activations.
    """
    out = np.maximum(xv, 0)
    neg = np.minimum(xv, 0)
    neg *= a[:, None, None]
    out += neg
    return out


def prelu(x: Tensor, a: Tensor) -> Tensor:
    """x for x >= 0, a_c * x otherwise, with one slope per channel (axis -3)."""
    if a.shape != (x.shape[-3],):
        raise ValueError(f"prelu: slope shape {a.shape} does not match {x.shape[-3]} channels")
    xv = x.value
    av = a.value[:, None, None]
    pos = xv >= 0
    out = Tensor(prelu_values(xv, a.value))

    def vjp(g):
        go = g[0]
        gx = np.where(pos, go, av * go)
        ga = _batch_sum(np.where(pos, 0, xv * go), 3).sum(axis=(-2, -1))
        return gx, ga

    record("prelu", (x, a), (out,), vjp)
    return out
