"""Low-level raster operators and their exact adjoints.

Every forward op here is linear (padding, convolution, downsampling), so the
backward pass is the literal transpose: folds and scatter-adds that mirror
the forward gathers index for index. Gradient checks elsewhere rely on these
adjoints being exact to rounding error, not approximations.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d


def reflect_index(n: int, radius: int) -> np.ndarray:
    """Indices implementing whole-sample reflection (no edge repeat).

    Handles any radius, unlike np.pad(mode='reflect'), by folding through the
    period 2n-2. For n == 1 everything maps to index 0.
    """
    base = np.arange(-radius, n + radius)
    if n == 1:
        return np.zeros_like(base)
    period = 2 * n - 2
    m = np.mod(base, period)
    return np.where(m >= n, period - m, m)


def pad_reflect(x: np.ndarray, ry: int, rx: int) -> np.ndarray:
    iy = reflect_index(x.shape[0], ry)
    ix = reflect_index(x.shape[1], rx)
    return x[iy][:, ix]


def _fold_last(u: np.ndarray, n: int, r: int) -> np.ndarray:
    """Adjoint of reflect padding along the last axis: (..., n+2r) -> (..., n)."""
    if r == 0:
        return u.copy()
    if n > r:  # single reflection, fold directly
        out = u[..., r : r + n].copy()
        out[..., 1 : r + 1] += u[..., r - 1 :: -1][..., :r]
        out[..., n - 1 - r : n - 1] += u[..., r + n : r + n + r][..., ::-1]
        return out
    idx = reflect_index(n, r)
    out = np.zeros(u.shape[:-1] + (n,), dtype=u.dtype)
    np.add.at(np.moveaxis(out, -1, 0), idx, np.moveaxis(u, -1, 0))
    return out


def pad_reflect_adjoint(u: np.ndarray, shape, ry: int, rx: int) -> np.ndarray:
    h, w = shape
    part = _fold_last(u, w, rx)
    return _fold_last(part.T, h, ry).T


def _conv1d_last(x: np.ndarray, k1d: np.ndarray) -> np.ndarray:
    """Same-size correlation along the last axis with reflect padding.

    scipy's 'mirror' mode implements exactly the whole-sample reflection of
    reflect_index, including the multi-fold behavior on tiny arrays.
    """
    return correlate1d(x, k1d, axis=-1, mode="mirror", output=np.float64)


def _conv1d_last_adjoint(u: np.ndarray, k1d: np.ndarray) -> np.ndarray:
    r = len(k1d) // 2
    w = u.shape[-1]
    up = np.zeros(u.shape[:-1] + (w + 2 * r,), dtype=np.float64)
    up[..., r : r + w] = u
    gp = correlate1d(up, k1d[::-1], axis=-1, mode="constant", output=np.float64)
    return _fold_last(gp, w, r)


def sep_filter(x: np.ndarray, k_row: np.ndarray, k_col: np.ndarray) -> np.ndarray:
    """Separable correlation over the trailing two axes: k_col along the last
    axis, then k_row along the second-to-last. Leading axes are batched."""
    y = _conv1d_last(x, k_col)
    y = np.swapaxes(_conv1d_last(np.swapaxes(y, -1, -2).copy(), k_row), -1, -2)
    return np.ascontiguousarray(y)


def sep_filter_adjoint(u: np.ndarray, k_row: np.ndarray, k_col: np.ndarray) -> np.ndarray:
    v = np.swapaxes(_conv1d_last_adjoint(np.swapaxes(u, -1, -2).copy(), k_row), -1, -2)
    return _conv1d_last_adjoint(np.ascontiguousarray(v), k_col)


def sep_blur(x: np.ndarray, k1d: np.ndarray) -> np.ndarray:
    """Separable symmetric blur with reflect padding (batched over leading axes)."""
    return sep_filter(x, k1d, k1d)


def sep_blur_adjoint(u: np.ndarray, k1d: np.ndarray) -> np.ndarray:
    return sep_filter_adjoint(u, k1d, k1d)


def conv2(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Dense correlation with reflect padding; output keeps the input shape."""
    kh, kw = kernel.shape
    ry, rx = kh // 2, kw // 2
    xp = pad_reflect(x, ry, rx)
    h, w = x.shape
    out = np.zeros((h, w), dtype=np.float64)
    for a in range(kh):
        for b in range(kw):
            k = kernel[a, b]
            if k != 0.0:
                out += k * xp[a : a + h, b : b + w]
    return out


def conv2_adjoint(u: np.ndarray, kernel: np.ndarray, shape) -> np.ndarray:
    kh, kw = kernel.shape
    ry, rx = kh // 2, kw // 2
    h, w = shape
    gp = np.zeros((h + 2 * ry, w + 2 * rx), dtype=np.float64)
    for a in range(kh):
        for b in range(kw):
            k = kernel[a, b]
            if k != 0.0:
                gp[a : a + h, b : b + w] += k * u
    return pad_reflect_adjoint(gp, shape, ry, rx)


def gaussian_kernel_1d(sigma: float, truncate: float = 3.0) -> np.ndarray:
    """Normalized 1D Gaussian truncated at `truncate` sigmas (radius >= 1)."""
    if sigma <= 0.0:
        return np.array([1.0])
    radius = max(1, int(np.ceil(truncate * sigma)))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def downsample2(x: np.ndarray) -> np.ndarray:
    """2x area downsample; odd trailing row/col is edge-replicated first."""
    h, w = x.shape
    if h % 2:
        x = np.concatenate([x, x[-1:]], axis=0)
    if w % 2:
        x = np.concatenate([x, x[:, -1:]], axis=1)
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def downsample2_adjoint(u: np.ndarray, shape) -> np.ndarray:
    h, w = shape
    hp, wp = h + (h % 2), w + (w % 2)
    g = np.zeros((hp, wp), dtype=np.float64)
    q = 0.25 * u
    g[0::2, 0::2] += q
    g[1::2, 0::2] += q
    g[0::2, 1::2] += q
    g[1::2, 1::2] += q
    if w % 2:
        g[:, w - 1] += g[:, w]
        g = g[:, :w]
    if h % 2:
        g[h - 1] += g[h]
        g = g[:h]
    return g


def avgpool2(x: np.ndarray) -> np.ndarray:
    """2x2 average pooling with stride 2, trailing odd row/col dropped."""
    h, w = x.shape[0] - x.shape[0] % 2, x.shape[1] - x.shape[1] % 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def avgpool2_adjoint(u: np.ndarray, shape) -> np.ndarray:
    g = np.zeros(shape, dtype=np.float64)
    q = 0.25 * u
    h, w = shape[0] - shape[0] % 2, shape[1] - shape[1] % 2
    g[0:h:2, 0:w:2] += q
    g[1:h:2, 0:w:2] += q
    g[0:h:2, 1:w:2] += q
    g[1:h:2, 1:w:2] += q
    return g
