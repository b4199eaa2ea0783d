"""Variable-rate mode: quantization, a factorized Gaussian entropy model,
joint rate-distortion training, and an actual coded bitstream.

Each parameter group (position, log_scale, rotation, color, opacity) has a
fixed quantization step and a learnable Gaussian prior N(m, s). Training
relaxes rounding to additive uniform noise with a straight-through gradient;
evaluation rounds. The SPQ1 bitstream packs the rounded integer indices with
a range coder driven by the same Gaussian bin probabilities (floored at
2^-16), so coded size tracks the model's bit estimate.

Rotations are wrapped to [-pi/2, pi/2) before quantization: the covariance
is pi-periodic in the angle, so the wrap changes nothing visually and halves
the coded range. Depth keys are not coded; splats are stored in depth order
and re-keyed 0..n-1 on decode, which renders identically.
"""

from __future__ import annotations

import json
import struct
import time
import zlib
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import ndtr

from . import losses
from .errors import (
    BadMagicError,
    CorruptStreamError,
    DivergenceError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from .image_io import psnr
from .losses import LossConfig
from .rangecoder import RangeDecoder, RangeEncoder
from .splat_render import SplatSet, render, render_backward
from .trainer import TrainConfig, _Adam, _densify_with_parents, init_splats
from .validation import as_image_array

GROUPS = ("position", "log_scale", "rotation", "color", "opacity")

_MAGIC = b"SPQ1"
_VERSION = 1
_PROB_FLOOR_BITS = 16  # bins never fall below 2^-16
_LN2 = np.log(2.0)

DEFAULT_DELTAS = {
    "position": 0.125,
    "log_scale": 0.03,
    "rotation": 0.02,
    "color": 0.1,
    "opacity": 0.1,
}

DEFAULT_LAMBDAS = (3.0**-2, 3.0**-3, 3.0**-4, 3.0**-5)


@dataclass
class RateModel:
    """Per-group quantization step and Gaussian prior (m, s)."""

    deltas: dict = field(default_factory=lambda: dict(DEFAULT_DELTAS))
    means: dict = field(default_factory=lambda: {g: 0.0 for g in GROUPS})
    scales: dict = field(default_factory=lambda: {g: 1.0 for g in GROUPS})

    def __post_init__(self):
        for g in GROUPS:
            if self.deltas[g] <= 0:
                raise ValueError(f"delta[{g}] must be > 0")
            self.scales[g] = max(float(self.scales[g]), 1e-4)

    def to_json(self) -> str:
        return json.dumps(
            {"deltas": self.deltas, "means": self.means, "scales": self.scales}
        )

    @classmethod
    def from_json(cls, text: str) -> "RateModel":
        return cls(**json.loads(text))


@dataclass
class RdConfig:
    lam: float = 3.0**-3
    lambdas: tuple = DEFAULT_LAMBDAS
    train: TrainConfig = field(default_factory=TrainConfig)
    model: RateModel = field(default_factory=RateModel)
    prior_lr: float = 0.02

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")


def wrap_rotation(theta: np.ndarray) -> np.ndarray:
    return np.mod(theta + np.pi / 2.0, np.pi) - np.pi / 2.0


def group_values(splats: SplatSet, group: str) -> np.ndarray:
    if group == "position":
        return splats.positions.ravel()
    if group == "log_scale":
        return splats.log_scales.ravel()
    if group == "rotation":
        return wrap_rotation(splats.rotations)
    if group == "color":
        return splats.colors_raw.ravel()
    return splats.opacity_logits


def _norm_pdf(z: np.ndarray) -> np.ndarray:
    return np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)


def _bin_bits_and_grads(values: np.ndarray, delta: float, m: float, s: float,
                        want_grads: bool):
    hi = (values + 0.5 * delta - m) / s
    lo = (values - 0.5 * delta - m) / s
    p = np.maximum(ndtr(hi) - ndtr(lo), 1e-15)
    bits = float(-np.log2(p).sum())
    if not want_grads:
        return bits, None, None, None
    phi_hi = _norm_pdf(hi)
    phi_lo = _norm_pdf(lo)
    denom = p * s * _LN2
    g_val = -(phi_hi - phi_lo) / denom
    g_m = float(((phi_hi - phi_lo) / denom).sum())
    g_s = float(((phi_hi * hi - phi_lo * lo) / denom).sum())
    return bits, g_val, g_m, g_s


@dataclass
class RateGradients:
    values: dict  # group -> gradient array matching group_values layout
    means: dict
    scales: dict


def rate_bits(splats: SplatSet, model: RateModel, mode: str, rng=None):
    """Estimated coded size in bits plus gradients (train mode only).

    train: values are perturbed with U(-delta/2, delta/2) and the gradient
    passes straight through the perturbation. eval: values are rounded to
    the quantization grid and no gradients are produced.
    """
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    if mode == "train" and rng is None:
        rng = np.random.default_rng(0)
    splats.check_finite()
    total = 0.0
    grads = RateGradients(values={}, means={}, scales={})
    for g in GROUPS:
        vals = group_values(splats, g)
        delta = float(model.deltas[g])
        if mode == "train":
            tilde = vals + rng.uniform(-0.5 * delta, 0.5 * delta, vals.shape)
        else:
            tilde = delta * np.rint(vals / delta)
        bits, g_val, g_m, g_s = _bin_bits_and_grads(
            tilde, delta, float(model.means[g]), float(model.scales[g]),
            want_grads=(mode == "train"),
        )
        total += bits
        if mode == "train":
            grads.values[g] = g_val
            grads.means[g] = g_m
            grads.scales[g] = g_s
    return total, (grads if mode == "train" else None)


def dequantize(splats: SplatSet, model: RateModel) -> SplatSet:
    """The splats a decoder will see: delta * rint(value/delta) per group,
    with float32 header precision applied to the steps."""
    out = splats.copy()
    d = {g: float(np.float32(model.deltas[g])) for g in GROUPS}
    out.positions = d["position"] * np.rint(out.positions / d["position"])
    out.log_scales = d["log_scale"] * np.rint(out.log_scales / d["log_scale"])
    out.rotations = d["rotation"] * np.rint(
        wrap_rotation(out.rotations) / d["rotation"])
    out.colors_raw = d["color"] * np.rint(out.colors_raw / d["color"])
    out.opacity_logits = d["opacity"] * np.rint(
        out.opacity_logits / d["opacity"])
    return out


def _add_value_grads(grads, splats: SplatSet, scale: float, rg: RateGradients):
    grads.positions += scale * rg.values["position"].reshape(-1, 2)
    grads.log_scales += scale * rg.values["log_scale"].reshape(-1, 2)
    grads.rotations += scale * rg.values["rotation"]
    grads.colors_raw += scale * rg.values["color"].reshape(-1, 3)
    grads.opacity_logits += scale * rg.values["opacity"]


def fit_rd(target, loss_cfg: LossConfig, rd: RdConfig, seed, init=64):
    """Jointly optimize splats and the entropy model under D + lambda*R.

    The rate term is measured in bits per pixel. Distortion is computed on
    the noise-relaxed (train-quantized) render so the decoded model stays
    faithful. init is a SplatSet or a seed count, as in fit.
    Returns (splats, model, report dict).
    """
    t0 = time.time()
    arr = as_image_array(target)
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    h, w = arr.shape[:2]
    npix = float(h * w)
    diag = float(np.hypot(h, w))
    tc = rd.train

    ss = np.random.SeedSequence(seed)
    init_seed, densify_ss, noise_ss = ss.spawn(3)
    densify_rng = np.random.default_rng(densify_ss)
    noise_rng = np.random.default_rng(noise_ss)

    if isinstance(init, SplatSet):
        splats = init.copy()
    else:
        splats = init_splats(arr, int(init), init_seed)
    model = RateModel(deltas=dict(rd.model.deltas), means=dict(rd.model.means),
                      scales=dict(rd.model.scales))
    for g in GROUPS:  # data-driven prior init
        vals = group_values(splats, g)
        model.means[g] = float(vals.mean())
        model.scales[g] = max(float(vals.std()), 0.25)

    warm_cfg = LossConfig(kind="original")
    warm_prep = losses.prepare_target(arr, warm_cfg)
    main_prep = losses.prepare_target(arr, loss_cfg)

    adam = _Adam(tc, diag)
    adam.init_state(splats)
    prior_m = {g: [0.0, 0.0] for g in GROUPS}  # adam moments for m
    prior_s = {g: [0.0, 0.0] for g in GROUPS}
    t_step = 0

    iters = tc.iterations
    warmup_end = int(round(tc.warmup_fraction * iters))
    densify_last = int(round(tc.densify_stop_fraction * iters))
    grad_accum = np.zeros(splats.n)
    accum_count = 0
    bits_history = []

    for it in range(iters):
        warming = it < warmup_end
        cfg_now = warm_cfg if warming else loss_cfg
        prepared = warm_prep if warming else main_prep

        noisy = splats.copy()
        draws = {}
        for g in GROUPS:
            delta = float(model.deltas[g])
            draws[g] = noise_rng.uniform(-0.5 * delta, 0.5 * delta,
                                         group_values(splats, g).shape)
        noisy.positions += draws["position"].reshape(-1, 2)
        noisy.log_scales += draws["log_scale"].reshape(-1, 2)
        noisy.rotations += draws["rotation"]
        noisy.colors_raw += draws["color"].reshape(-1, 3)
        noisy.opacity_logits += draws["opacity"]

        out = render(noisy, w, h, tc.background)
        d_value, img_grad = losses.evaluate(arr, out.image.data, cfg_now, prepared)
        grads = render_backward(noisy, img_grad, tc.background)

        bits = 0.0
        if rd.lam > 0.0:
            bits, rg = _rate_on_noisy(splats, model, draws)
            _add_value_grads(grads, splats, rd.lam / npix, rg)
        value = d_value + rd.lam * bits / npix
        if not np.isfinite(value):
            raise DivergenceError(f"non-finite RD loss at iteration {it}",
                                  iteration=it)

        adam.step(splats, grads)
        if rd.lam > 0.0:
            t_step += 1
            for g in GROUPS:
                model.means[g] = _adam_scalar(
                    prior_m[g], rd.lam / npix * rg.means[g], model.means[g],
                    rd.prior_lr, tc, t_step)
                model.scales[g] = max(_adam_scalar(
                    prior_s[g], rd.lam / npix * rg.scales[g], model.scales[g],
                    rd.prior_lr, tc, t_step), 1e-4)

        if it + 1 == warmup_end:
            grad_accum = np.zeros(splats.n)
            accum_count = 0
        else:
            grad_accum += grads.pos_grad_norm
            accum_count += 1
        bits_history.append(bits)

        step = it + 1
        if (not warming and step <= densify_last and accum_count > 0
                and step % tc.densify_interval == 0 and step < iters):
            dseed = int(densify_rng.integers(0, 2**63 - 1))
            splats, parents = _densify_with_parents(
                splats, grad_accum / accum_count, tc, dseed, diag)
            adam.remap(parents)
            grad_accum = np.zeros(splats.n)
            accum_count = 0

    eval_bits, _ = rate_bits(splats, model, "eval")
    decoded = dequantize(splats, model)
    dec_img = render(decoded, w, h, tc.background).image.data
    payload = encode_bytes(splats, model)
    report = {
        "lambda": rd.lam,
        "splat_count": splats.n,
        "eval_bits": eval_bits,
        "bytes": len(payload),
        "psnr_decoded": psnr(arr, dec_img),
        "wd_sigma4_decoded": losses.loss_wd(
            arr, dec_img, LossConfig(kind="wd", sigma=4.0, bank=loss_cfg.bank))[0],
        "distortion_final": float(d_value),
        "wall_time_s": time.time() - t0,
    }
    return splats, model, report


def _rate_on_noisy(splats: SplatSet, model: RateModel, draws: dict):
    total = 0.0
    grads = RateGradients(values={}, means={}, scales={})
    for g in GROUPS:
        vals = group_values(splats, g) + draws[g]
        bits, g_val, g_m, g_s = _bin_bits_and_grads(
            vals, float(model.deltas[g]), float(model.means[g]),
            float(model.scales[g]), want_grads=True)
        total += bits
        grads.values[g] = g_val
        grads.means[g] = g_m
        grads.scales[g] = g_s
    return total, grads


def _adam_scalar(state, grad, value, lr, tc: TrainConfig, t):
    state[0] = tc.adam_beta1 * state[0] + (1 - tc.adam_beta1) * grad
    state[1] = tc.adam_beta2 * state[1] + (1 - tc.adam_beta2) * grad * grad
    mhat = state[0] / (1 - tc.adam_beta1**t)
    vhat = state[1] / (1 - tc.adam_beta2**t)
    return value - lr * mhat / (np.sqrt(vhat) + tc.adam_eps)


def rd_sweep(target, loss_cfg: LossConfig, rd: RdConfig, seed) -> list:
    """Run fit_rd at every lambda in rd.lambdas; rows sorted by lambda."""
    rows = []
    for lam in sorted(rd.lambdas):
        cfg = replace(rd, lam=float(lam))
        _, _, report = fit_rd(target, loss_cfg, cfg, seed)
        rows.append(report)
    return rows


# --- bitstream -----------------------------------------------------------


def _group_tables(delta32: float, m32: float, s32: float, kmin: int, kmax: int):
    """Integer frequency table for the alphabet [kmin, kmax], built from the
    float32 header parameters so encoder and decoder agree exactly."""
    ks = np.arange(kmin, kmax + 1, dtype=np.float64)
    centers = ks * float(delta32)
    hi = (centers + 0.5 * delta32 - m32) / s32
    lo = (centers - 0.5 * delta32 - m32) / s32
    p = np.maximum(ndtr(hi) - ndtr(lo), 2.0**-_PROB_FLOOR_BITS)
    nsym = len(ks)
    budget = (1 << 16) - nsym
    counts = 1 + np.floor(p * budget).astype(np.int64)
    cum = np.zeros(nsym + 1, dtype=np.int64)
    np.cumsum(counts, out=cum[1:])
    return counts, cum, int(cum[-1])


def _canonical_order(splats: SplatSet) -> SplatSet:
    return splats.take(splats.depth_order())


def encode_bytes(splats: SplatSet, model: RateModel) -> bytes:
    """SPQ1 stream: header (magic, version, n, per-group float32 delta/m/s
    and int32 alphabet bounds, payload crc32) + range-coded indices."""
    splats = _canonical_order(splats)
    n = splats.n
    header = bytearray()
    header += _MAGIC
    header += struct.pack("<II", _VERSION, n)
    enc = RangeEncoder()
    group_meta = []
    all_indices = []
    for g in GROUPS:
        delta32 = float(np.float32(model.deltas[g]))
        m32 = float(np.float32(model.means[g]))
        s32 = float(np.float32(max(model.scales[g], 1e-4)))
        vals = group_values(splats, g)
        idx = np.rint(vals / delta32).astype(np.int64)
        kmin = int(idx.min(initial=0))
        kmax = int(idx.max(initial=0))
        group_meta.append((delta32, m32, s32, kmin, kmax))
        all_indices.append(idx)
        header += struct.pack("<fffii", delta32, m32, s32, kmin, kmax)
    for (delta32, m32, s32, kmin, kmax), idx in zip(group_meta, all_indices):
        counts, cum, total = _group_tables(delta32, m32, s32, kmin, kmax)
        for k in idx:
            sym = int(k) - kmin
            enc.encode(int(cum[sym]), int(counts[sym]), total)
    payload = enc.finish()
    header += struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)
    return bytes(header) + payload


def encode_quantized(splats: SplatSet, model: RateModel, path) -> int:
    """Write the coded stream; returns the total file size in bytes."""
    blob = encode_bytes(splats, model)
    from pathlib import Path

    Path(path).write_bytes(blob)
    return len(blob)


def decode_bytes(blob: bytes) -> SplatSet:
    hdr_len = 4 + 8 + len(GROUPS) * 20 + 4
    if len(blob) < hdr_len:
        raise TruncatedPayloadError(f"stream shorter than header ({len(blob)} bytes)")
    if blob[:4] != _MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}")
    version, n = struct.unpack("<II", blob[4:12])
    if version != _VERSION:
        raise VersionMismatchError(f"stream version {version} != {_VERSION}")
    metas = []
    off = 12
    for _ in GROUPS:
        metas.append(struct.unpack("<fffii", blob[off : off + 20]))
        off += 20
    (crc,) = struct.unpack("<I", blob[off : off + 4])
    payload = blob[off + 4 :]
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise CorruptStreamError("payload checksum mismatch")
    dec = RangeDecoder(payload)
    values = {}
    for g, (delta32, m32, s32, kmin, kmax) in zip(GROUPS, metas):
        counts, cum, total = _group_tables(delta32, m32, s32, kmin, kmax)
        count = {"position": 2 * n, "log_scale": 2 * n, "rotation": n,
                 "color": 3 * n, "opacity": n}[g]
        idx = np.empty(count, dtype=np.int64)
        for i in range(count):
            t = dec.decode_target(total)
            sym = int(np.searchsorted(cum, t, side="right")) - 1
            idx[i] = sym + kmin
            dec.advance(int(cum[sym]), int(counts[sym]))
        values[g] = idx.astype(np.float64) * float(delta32)
    return SplatSet(
        positions=values["position"].reshape(-1, 2),
        log_scales=values["log_scale"].reshape(-1, 2),
        rotations=values["rotation"],
        colors_raw=values["color"].reshape(-1, 3),
        opacity_logits=values["opacity"],
        depth_keys=np.arange(n, dtype=np.float64),
    )


def decode(path) -> SplatSet:
    from pathlib import Path

    return decode_bytes(Path(path).read_bytes())
