"""2D Gaussian splat model and differentiable alpha-blended renderer.

Each splat is an anisotropic Gaussian with position, per-axis log scales,
rotation, logistic-squashed color and opacity, and a fixed depth key that
defines the front-to-back compositing order (ties broken by index). The
backward pass accumulates exact parameter gradients by reversing the
compositing chain with a running suffix color.

Splats are evaluated inside an axis-aligned box where the Gaussian tail
exceeds 1e-12; beyond that the contribution is numerically negligible, which
keeps the hard cutoff invisible to finite-difference gradient checks.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import (
    BadMagicError,
    ShapeMismatchError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from .image_io import ImageBuffer

_MAGIC = b"SPL2"
_VERSION = 1
_RECORD_FLOATS = 11

# exp(-q/2) = 1e-12 at the support boundary
_Q_MAX = -2.0 * math.log(1e-12)
_RADIUS_FACTOR = math.sqrt(_Q_MAX)

_ALPHA_MAX = 1.0 - 1e-9


@dataclass
class SplatSet:
    """Array-of-parameters model of n anisotropic 2D Gaussian splats."""

    positions: np.ndarray  # (n, 2) pixel coordinates (x, y)
    log_scales: np.ndarray  # (n, 2)
    rotations: np.ndarray  # (n,) radians
    colors_raw: np.ndarray  # (n, 3) unconstrained, squashed by expit
    opacity_logits: np.ndarray  # (n,)
    depth_keys: np.ndarray  # (n,) fixed blend-order keys

    def __post_init__(self):
        n = self.n
        for name in ("positions", "log_scales", "rotations", "colors_raw",
                     "opacity_logits", "depth_keys"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            setattr(self, name, arr)
        if self.positions.shape != (n, 2) or self.log_scales.shape != (n, 2):
            raise ValueError("positions/log_scales must be (n, 2)")
        if self.colors_raw.shape != (n, 3):
            raise ValueError("colors_raw must be (n, 3)")
        for name in ("rotations", "opacity_logits", "depth_keys"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must be (n,)")

    @property
    def n(self) -> int:
        return int(np.asarray(self.positions).shape[0])

    def colors(self) -> np.ndarray:
        return expit(self.colors_raw)

    def opacities(self) -> np.ndarray:
        return np.minimum(expit(self.opacity_logits), _ALPHA_MAX)

    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def covariances(self) -> np.ndarray:
        """Per-splat 2x2 covariance R diag(s1^2, s2^2) R^T."""
        c = np.cos(self.rotations)
        s = np.sin(self.rotations)
        s1sq, s2sq = np.exp(2.0 * self.log_scales).T
        xx = c * c * s1sq + s * s * s2sq
        yy = s * s * s1sq + c * c * s2sq
        xy = c * s * (s1sq - s2sq)
        cov = np.empty((self.n, 2, 2))
        cov[:, 0, 0] = xx
        cov[:, 1, 1] = yy
        cov[:, 0, 1] = cov[:, 1, 0] = xy
        return cov

    def depth_order(self) -> np.ndarray:
        return np.lexsort((np.arange(self.n), self.depth_keys))

    def copy(self) -> "SplatSet":
        return SplatSet(
            positions=self.positions.copy(),
            log_scales=self.log_scales.copy(),
            rotations=self.rotations.copy(),
            colors_raw=self.colors_raw.copy(),
            opacity_logits=self.opacity_logits.copy(),
            depth_keys=self.depth_keys.copy(),
        )

    def take(self, idx) -> "SplatSet":
        return SplatSet(
            positions=self.positions[idx],
            log_scales=self.log_scales[idx],
            rotations=self.rotations[idx],
            colors_raw=self.colors_raw[idx],
            opacity_logits=self.opacity_logits[idx],
            depth_keys=self.depth_keys[idx],
        )

    @classmethod
    def empty(cls) -> "SplatSet":
        return cls(
            positions=np.zeros((0, 2)),
            log_scales=np.zeros((0, 2)),
            rotations=np.zeros(0),
            colors_raw=np.zeros((0, 3)),
            opacity_logits=np.zeros(0),
            depth_keys=np.zeros(0),
        )

    def check_finite(self) -> None:
        for name in ("positions", "log_scales", "rotations", "colors_raw",
                     "opacity_logits", "depth_keys"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite values in {name}")


@dataclass
class RenderOutput:
    image: ImageBuffer  # (H, W, 3)
    transmittance: np.ndarray  # (H, W)


@dataclass
class SplatGradients:
    """dLoss/dParameter for every splat, plus the positional-gradient
    magnitudes that drive densification."""

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    colors_raw: np.ndarray
    opacity_logits: np.ndarray
    pos_grad_norm: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "SplatGradients":
        return cls(
            positions=np.zeros((n, 2)),
            log_scales=np.zeros((n, 2)),
            rotations=np.zeros(n),
            colors_raw=np.zeros((n, 3)),
            opacity_logits=np.zeros(n),
            pos_grad_norm=np.zeros(n),
        )

    def check_finite(self) -> None:
        for name in ("positions", "log_scales", "rotations", "colors_raw",
                     "opacity_logits"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite gradient in {name}")


def _footprint(splats: SplatSet, i: int, width: int, height: int):
    """Bounding box and Gaussian kernel values of splat i, or None."""
    cx, cy = splats.positions[i]
    theta = splats.rotations[i]
    s1, s2 = np.exp(splats.log_scales[i])
    c, s = math.cos(theta), math.sin(theta)
    ex = _RADIUS_FACTOR * math.sqrt((c * s1) ** 2 + (s * s2) ** 2)
    ey = _RADIUS_FACTOR * math.sqrt((s * s1) ** 2 + (c * s2) ** 2)
    x0 = max(0, int(math.ceil(cx - ex)))
    x1 = min(width - 1, int(math.floor(cx + ex)))
    y0 = max(0, int(math.ceil(cy - ey)))
    y1 = min(height - 1, int(math.floor(cy + ey)))
    if x0 > x1 or y0 > y1:
        return None
    dx = np.arange(x0, x1 + 1, dtype=np.float64) - cx
    dy = np.arange(y0, y1 + 1, dtype=np.float64) - cy
    u1 = c * dx[None, :] + s * dy[:, None]
    u2 = -s * dx[None, :] + c * dy[:, None]
    inv1, inv2 = 1.0 / (s1 * s1), 1.0 / (s2 * s2)
    q = u1 * u1 * inv1 + u2 * u2 * inv2
    gauss = np.exp(-0.5 * q)
    box = (slice(y0, y1 + 1), slice(x0, x1 + 1))
    return box, gauss, u1, u2, (c, s, inv1, inv2)


def _as_background(background) -> np.ndarray:
    bg = np.asarray(background, dtype=np.float64).reshape(-1)
    if bg.size == 1:
        bg = np.repeat(bg, 3)
    if bg.size != 3:
        raise ValueError("background must be a scalar or 3-vector")
    return bg


def render(splats: SplatSet, width: int, height: int,
           background=(0.0, 0.0, 0.0)) -> RenderOutput:
    """Front-to-back alpha compositing in ascending depth-key order.

    Per pixel p and splat i: a_i(p) = alpha_i * exp(-0.5 d^T Sigma_i^{-1} d);
    C(p) = sum_i c_i a_i(p) prod_{j<i} (1 - a_j(p)) + T(p) * background.
    """
    splats.check_finite()
    bg = _as_background(background)
    img = np.zeros((height, width, 3))
    trans = np.ones((height, width))
    colors = splats.colors()
    alphas = splats.opacities()
    for i in splats.depth_order():
        fp = _footprint(splats, i, width, height)
        if fp is None:
            continue
        box, gauss, _, _, _ = fp
        a = alphas[i] * gauss
        w = a * trans[box]
        img[box] += w[:, :, None] * colors[i]
        trans[box] *= 1.0 - a
    img += trans[:, :, None] * bg
    return RenderOutput(image=ImageBuffer(img), transmittance=trans)


def render_backward(splats: SplatSet, image_grad: np.ndarray,
                    background=(0.0, 0.0, 0.0)) -> SplatGradients:
    """Exact parameter gradients given dLoss/dC per pixel.

    Replays the compositing front-to-back to capture per-splat transmittance,
    then walks back-to-front maintaining the suffix color S so that
    dC/da_i = c_i * T_i - S_i / (1 - a_i).
    """
    upstream = np.asarray(image_grad, dtype=np.float64)
    if upstream.ndim != 3 or upstream.shape[2] != 3:
        raise ShapeMismatchError(f"image gradient must be (H, W, 3), got {upstream.shape}")
    if not np.all(np.isfinite(upstream)):
        raise ValueError("non-finite image gradient")
    splats.check_finite()
    height, width = upstream.shape[:2]
    bg = _as_background(background)
    colors = splats.colors()
    alphas = splats.opacities()
    order = splats.depth_order()

    trans = np.ones((height, width))
    cache = {}
    for i in order:
        fp = _footprint(splats, i, width, height)
        if fp is None:
            continue
        box, gauss, u1, u2, geom = fp
        a = alphas[i] * gauss
        cache[i] = (box, a, trans[box].copy(), gauss, u1, u2, geom)
        trans[box] *= 1.0 - a

    grads = SplatGradients.zeros(splats.n)
    suffix = trans[:, :, None] * bg  # color contributed behind the current splat
    for i in order[::-1]:
        if i not in cache:
            continue
        box, a, t_before, gauss, u1, u2, (c, s, inv1, inv2) = cache[i]
        w = a * t_before
        u_box = upstream[box]
        col = colors[i]

        g_color = np.einsum("yxc,yx->c", u_box, w)
        grads.colors_raw[i] = g_color * col * (1.0 - col)

        s_box = suffix[box]
        u_dot_col = u_box @ col
        u_dot_s = np.einsum("yxc,yxc->yx", u_box, s_box)
        g_a = t_before * u_dot_col - u_dot_s / (1.0 - a)
        alpha = alphas[i]
        ga_a = g_a * a
        # sum(g_a * gauss) * alpha * (1-alpha) == sum(g_a * a) * (1-alpha)
        grads.opacity_logits[i] = float(ga_a.sum()) * (1.0 - alpha)

        g_q = -0.5 * ga_a
        t1 = g_q * u1
        t2 = g_q * u2
        s_gu1 = float(t1.sum())
        s_gu2 = float(t2.sum())
        gx = -2.0 * (c * inv1 * s_gu1 - s * inv2 * s_gu2)
        gy = -2.0 * (s * inv1 * s_gu1 + c * inv2 * s_gu2)
        grads.positions[i] = (gx, gy)
        grads.pos_grad_norm[i] = math.hypot(gx, gy)
        grads.log_scales[i, 0] = -2.0 * float((t1 * u1).sum()) * inv1
        grads.log_scales[i, 1] = -2.0 * float((t2 * u2).sum()) * inv2
        grads.rotations[i] = 2.0 * float((t1 * u2).sum()) * (inv1 - inv2)

        suffix[box] = s_box + w[:, :, None] * col
    grads.check_finite()
    return grads


# --- checkpoint format ---------------------------------------------------


def save_splats(splats: SplatSet, path, meta: dict | None = None) -> None:
    """Write the little-endian SPL2 checkpoint plus an optional JSON sidecar."""
    path = Path(path)
    n = splats.n
    rec = np.zeros((n, _RECORD_FLOATS), dtype="<f4")
    rec[:, 0:2] = splats.positions
    rec[:, 2:4] = splats.log_scales
    rec[:, 4] = splats.rotations
    rec[:, 5:8] = splats.colors_raw
    rec[:, 8] = splats.opacity_logits
    rec[:, 9] = splats.depth_keys
    header = _MAGIC + struct.pack("<III", _VERSION, n, 0)  # 16 bytes, last word reserved
    path.write_bytes(header + rec.tobytes())
    if meta is not None:
        Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=2))


def load_splats(path) -> SplatSet:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise TruncatedPayloadError(f"{path}: shorter than the 16-byte header")
    if raw[:4] != _MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}")
    version, n, _ = struct.unpack("<III", raw[4:16])
    if version != _VERSION:
        raise VersionMismatchError(f"{path}: version {version} != {_VERSION}")
    need = 16 + n * _RECORD_FLOATS * 4
    if len(raw) < need:
        raise TruncatedPayloadError(f"{path}: {len(raw)} bytes, expected {need}")
    rec = np.frombuffer(raw, dtype="<f4", count=n * _RECORD_FLOATS, offset=16)
    rec = rec.reshape(n, _RECORD_FLOATS).astype(np.float64)
    return SplatSet(
        positions=rec[:, 0:2],
        log_scales=rec[:, 2:4],
        rotations=rec[:, 4],
        colors_raw=rec[:, 5:8],
        opacity_logits=rec[:, 8],
        depth_keys=rec[:, 9],
    )
