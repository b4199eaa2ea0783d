"""Fixed multi-scale filter-bank feature extractor with an exact adjoint.

The bank is hand-designed and constant: per pyramid level a luminance
pass-through, a center-surround difference-of-Gaussians, and four oriented
first-derivative-of-Gaussian channels, plus two chroma pass-throughs at full
resolution. Zero-mean filter outputs are rectified with a smoothed absolute
value so the whole map is differentiable everywhere.

All convolutions run separably: the DoG is a difference of two separable
blurs, and the four orientations are linear combinations of the two
separable derivative basis responses (x*G and y*G). The dense kernels are
still materialized for inspection and for the zero-sum invariants.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import _ops
from .validation import as_image_array, check_finite

# Rec. 601 luma weights; chroma is the (R - Y, B - Y) opponent pair.
_LUMA_W = (0.299, 0.587, 0.114)

_FILTER_NAMES = ("dog", "d0", "d45", "d90", "d135")
_ORIENT_DEGREES = (0, 45, 90, 135)


@dataclass(frozen=True)
class FilterBankSpec:
    """Constant filter-bank configuration (nothing here is learned).

    filter_gain scales the zero-mean (DoG and oriented-derivative) kernels so
    texture statistics carry weight comparable to deep-feature magnitudes;
    pass-through channels keep unit gain so they report raw image values.
    """

    num_levels: int = 3
    dog_sigma_center: float = 1.0
    dog_sigma_surround: float = 2.0
    deriv_sigma: float = 1.0
    rect_eps: float = 1e-3
    filter_gain: float = 100.0

    def to_json(self) -> str:
        return json.dumps(
            {
                "num_levels": self.num_levels,
                "dog_sigma_center": self.dog_sigma_center,
                "dog_sigma_surround": self.dog_sigma_surround,
                "deriv_sigma": self.deriv_sigma,
                "rect_eps": self.rect_eps,
                "filter_gain": self.filter_gain,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "FilterBankSpec":
        return cls(**json.loads(text))


@dataclass
class FeatureStack:
    """Per-level feature maps, channels-first: levels[l] has shape (C_l, H_l, W_l)."""

    levels: list = field(default_factory=list)
    channel_names: list = field(default_factory=list)

    def zeros_like(self) -> "FeatureStack":
        return FeatureStack(
            levels=[np.zeros_like(lv) for lv in self.levels],
            channel_names=[list(n) for n in self.channel_names],
        )


def _gaussian2d(sigma: float, radius: int) -> np.ndarray:
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    yy, xx = np.meshgrid(t, t, indexing="ij")
    k = np.exp(-0.5 * (xx**2 + yy**2) / sigma**2)
    return k / k.sum()


@lru_cache(maxsize=None)
def _bank_parts(dog_c: float, dog_s: float, deriv_sigma: float, gain: float):
    """Separable pieces plus the per-orientation normalization constants."""
    r_dog = int(np.ceil(3.0 * dog_s))
    t = np.arange(-r_dog, r_dog + 1, dtype=np.float64)
    gc = np.exp(-0.5 * (t / dog_c) ** 2)
    gs = np.exp(-0.5 * (t / dog_s) ** 2)
    gc /= gc.sum()
    gs /= gs.sum()

    r = int(np.ceil(3.0 * deriv_sigma))
    td = np.arange(-r, r + 1, dtype=np.float64)
    env = np.exp(-0.5 * (td / deriv_sigma) ** 2)
    ramp = td * env
    # Orientation kernel: (x cos + y sin) * env2d = cos * Kx + sin * Ky with
    # Kx = ramp(x) env(y), Ky = env(x) ramp(y); normalize each dense kernel so
    # its positive lobe sums to gain/2.
    yy, xx = np.meshgrid(td, td, indexing="ij")
    env2 = np.exp(-0.5 * (xx**2 + yy**2) / deriv_sigma**2)
    norms = {}
    for deg in _ORIENT_DEGREES:
        phi = np.deg2rad(deg)
        dense = (xx * np.cos(phi) + yy * np.sin(phi)) * env2
        norms[deg] = 2.0 * gain / np.abs(dense).sum()
    return dict(gc=gc, gs=gs, env=env, ramp=ramp, norms=norms, gain=gain)


@lru_cache(maxsize=None)
def _bank_kernels(dog_c: float, dog_s: float, deriv_sigma: float, gain: float):
    """Dense kernel set, for inspection and the slow reference conv path."""
    r_dog = int(np.ceil(3.0 * dog_s))
    kernels = {"dog": gain * (_gaussian2d(dog_c, r_dog) - _gaussian2d(dog_s, r_dog))}
    parts = _bank_parts(dog_c, dog_s, deriv_sigma, gain)
    r = int(np.ceil(3.0 * deriv_sigma))
    td = np.arange(-r, r + 1, dtype=np.float64)
    yy, xx = np.meshgrid(td, td, indexing="ij")
    env2 = np.exp(-0.5 * (xx**2 + yy**2) / deriv_sigma**2)
    for deg in _ORIENT_DEGREES:
        phi = np.deg2rad(deg)
        kernels[f"d{deg}"] = (xx * np.cos(phi) + yy * np.sin(phi)) * env2 * parts["norms"][deg]
    return kernels


def bank_kernels(spec: FilterBankSpec) -> dict:
    return _bank_kernels(
        spec.dog_sigma_center, spec.dog_sigma_surround, spec.deriv_sigma,
        spec.filter_gain,
    )


def _to_luma_chroma(arr: np.ndarray):
    if arr.shape[2] == 1:
        y = arr[:, :, 0]
        zero = np.zeros_like(y)
        return y, zero, zero
    wr, wg, wb = _LUMA_W
    y = wr * arr[:, :, 0] + wg * arr[:, :, 1] + wb * arr[:, :, 2]
    return y, arr[:, :, 0] - y, arr[:, :, 2] - y


def _luma_chroma_adjoint(gy, gc1, gc2, channels: int) -> np.ndarray:
    if channels == 1:
        return gy[:, :, None]
    wr, wg, wb = _LUMA_W
    gy_total = gy - gc1 - gc2  # both chroma channels subtract the full luma
    gr = wr * gy_total + gc1
    gg = wg * gy_total
    gb = wb * gy_total + gc2
    return np.stack([gr, gg, gb], axis=2)


def _rect(x: np.ndarray, eps: float) -> np.ndarray:
    return np.sqrt(x * x + eps * eps) - eps


def _rect_deriv(x: np.ndarray, eps: float) -> np.ndarray:
    return x / np.sqrt(x * x + eps * eps)


def _level_raw_responses(lum: np.ndarray, parts) -> dict:
    rx = _ops.sep_filter(lum, parts["env"], parts["ramp"])  # d/dx basis
    ry = _ops.sep_filter(lum, parts["ramp"], parts["env"])  # d/dy basis
    raws = {"dog": parts["gain"] * (_ops.sep_blur(lum, parts["gc"])
                                   - _ops.sep_blur(lum, parts["gs"]))}
    for deg in _ORIENT_DEGREES:
        phi = math.radians(deg)
        raws[f"d{deg}"] = parts["norms"][deg] * (math.cos(phi) * rx + math.sin(phi) * ry)
    return raws


def _level_raw_adjoint(g_raws: dict, parts, shape) -> np.ndarray:
    g_dog = parts["gain"] * g_raws["dog"]
    g = _ops.sep_blur_adjoint(g_dog, parts["gc"])
    g -= _ops.sep_blur_adjoint(g_dog, parts["gs"])
    g_rx = np.zeros(shape)
    g_ry = np.zeros(shape)
    for deg in _ORIENT_DEGREES:
        phi = math.radians(deg)
        u = parts["norms"][deg] * g_raws[f"d{deg}"]
        g_rx += math.cos(phi) * u
        g_ry += math.sin(phi) * u
    g += _ops.sep_filter_adjoint(g_rx, parts["env"], parts["ramp"])
    g += _ops.sep_filter_adjoint(g_ry, parts["ramp"], parts["env"])
    return g


def _forward_tape(img, spec: FilterBankSpec):
    arr = as_image_array(img)
    min_side = 2**spec.num_levels
    if min(arr.shape[0], arr.shape[1]) < min_side:
        raise ValueError(
            f"image {arr.shape[:2]} smaller than {min_side} per side for "
            f"{spec.num_levels} pyramid levels"
        )
    check_finite(arr, "image")
    parts = _bank_parts(
        spec.dog_sigma_center, spec.dog_sigma_surround, spec.deriv_sigma,
        spec.filter_gain,
    )
    y, c1, c2 = _to_luma_chroma(arr)
    levels = []
    names = []
    tape = {"channels": arr.shape[2], "lums": [], "raws": [], "spec": spec,
            "parts": parts}
    lum = y
    for lvl in range(spec.num_levels):
        if lvl > 0:
            lum = _ops.downsample2(lum)
        tape["lums"].append(lum)
        chans = [lum]
        chan_names = ["luma"]
        if lvl == 0:
            chans += [c1, c2]
            chan_names += ["chroma_rg", "chroma_by"]
        raws = _level_raw_responses(lum, parts)
        tape["raws"].append(raws)
        for name in _FILTER_NAMES:
            chans.append(_rect(raws[name], spec.rect_eps))
            chan_names.append(name)
        levels.append(np.stack(chans, axis=0))
        names.append(chan_names)
    return FeatureStack(levels=levels, channel_names=names), tape


def extract(img, spec: FilterBankSpec = FilterBankSpec()) -> FeatureStack:
    """Compute the feature pyramid for a 1- or 3-channel [0,1] image."""
    stack, _ = _forward_tape(img, spec)
    return stack


def _backward_tape(tape, upstream: FeatureStack) -> np.ndarray:
    spec = tape["spec"]
    parts = tape["parts"]
    g_lum = None
    gc1 = gc2 = None
    for lvl in range(spec.num_levels - 1, -1, -1):
        lum = tape["lums"][lvl]
        u = upstream.levels[lvl]
        if u.shape[1:] != lum.shape:
            raise ValueError(
                f"upstream level {lvl} shape {u.shape[1:]} != {lum.shape}"
            )
        if g_lum is None:
            g = np.zeros_like(lum)
        else:
            g = _ops.downsample2_adjoint(g_lum, lum.shape)
        pos = 0
        g += u[pos]
        pos += 1
        if lvl == 0:
            gc1 = u[pos]
            gc2 = u[pos + 1]
            pos += 2
        g_raws = {}
        for name in _FILTER_NAMES:
            raw = tape["raws"][lvl][name]
            g_raws[name] = u[pos] * _rect_deriv(raw, spec.rect_eps)
            pos += 1
        g += _level_raw_adjoint(g_raws, parts, lum.shape)
        g_lum = g
    return _luma_chroma_adjoint(g_lum, gc1, gc2, tape["channels"])


def extract_backward(img, spec: FilterBankSpec, upstream: FeatureStack) -> np.ndarray:
    """Exact adjoint of extract: upstream feature gradients -> image gradient."""
    _, tape = _forward_tape(img, spec)
    return _backward_tape(tape, upstream)
