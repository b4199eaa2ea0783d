"""Fitting loop: first-order optimization of a SplatSet against a target
image, with warm-up scheduling and gradient-driven densification.

The warm-up phase always optimizes the plain 0.8*L1 + 0.2*SSIM objective
before switching to the configured loss; densification then runs on a fixed
interval until a stop fraction of the schedule, cloning small high-gradient
splats and splitting large ones. Because splat growth is triggered by
positional-gradient magnitudes, the global loss scale directly modulates the
final splat count.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.special import logit as _logit

from . import losses
from .errors import DivergenceError
from .image_io import ImageBuffer, psnr
from .losses import LossConfig
from .splat_render import SplatGradients, SplatSet, render, render_backward, save_splats
from .validation import as_image_array

logger = logging.getLogger(__name__)

_PARAM_GROUPS = ("positions", "log_scales", "rotations", "colors_raw", "opacity_logits")


@dataclass
class TrainConfig:
    iterations: int = 2000
    warmup_fraction: float = 0.15
    lr_position: float = 2e-3  # in units of image diagonal per step
    lr_log_scale: float = 5e-3
    lr_rotation: float = 1e-2
    lr_color: float = 1e-2
    lr_opacity: float = 2.5e-2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-4
    split_scale_fraction: float = 0.01  # of image diagonal: larger -> split
    split_factor: float = 1.6
    prune_opacity_threshold: float = 0.005
    densify_stop_fraction: float = 0.5
    max_splats: int = 4000
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ValueError("warmup_fraction must be in [0, 1]")
        for name in ("densify_interval", "max_splats"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("densify_grad_threshold", "split_scale_fraction",
                     "split_factor", "prune_opacity_threshold"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")

    def to_json(self) -> str:
        d = asdict(self)
        d["background"] = list(self.background)
        return json.dumps(d)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        d = json.loads(text)
        if "background" in d:
            d["background"] = tuple(d["background"])
        return cls(**d)


@dataclass
class TrainReport:
    loss_values: list = field(default_factory=list)
    splat_counts: list = field(default_factory=list)
    wall_time_s: float = 0.0
    final_metrics: dict = field(default_factory=dict)
    gamma: float = 1.0
    loss_kind: str = "original"
    seed: int | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    def to_csv(self) -> str:
        lines = ["iteration,loss,splat_count"]
        for i, (lv, sc) in enumerate(zip(self.loss_values, self.splat_counts)):
            lines.append(f"{i},{lv!r},{sc}")
        return "\n".join(lines) + "\n"


class _Adam:
    """Per-group Adam with shared step count and bias correction."""

    def __init__(self, cfg: TrainConfig, diagonal: float):
        self.cfg = cfg
        self.lrs = {
            "positions": cfg.lr_position * diagonal,
            "log_scales": cfg.lr_log_scale,
            "rotations": cfg.lr_rotation,
            "colors_raw": cfg.lr_color,
            "opacity_logits": cfg.lr_opacity,
        }
        self.m = {}
        self.v = {}
        self.t = 0

    def init_state(self, splats: SplatSet) -> None:
        for g in _PARAM_GROUPS:
            arr = getattr(splats, g)
            self.m[g] = np.zeros_like(arr)
            self.v[g] = np.zeros_like(arr)

    def remap(self, parent_idx: np.ndarray) -> None:
        """Carry moments of surviving splats; new splats start from zero."""
        for g in _PARAM_GROUPS:
            old_m, old_v = self.m[g], self.v[g]
            new_m = np.zeros((len(parent_idx),) + old_m.shape[1:])
            new_v = np.zeros_like(new_m)
            kept = parent_idx >= 0
            new_m[kept] = old_m[parent_idx[kept]]
            new_v[kept] = old_v[parent_idx[kept]]
            self.m[g], self.v[g] = new_m, new_v

    def step(self, splats: SplatSet, grads: SplatGradients) -> None:
        self.t += 1
        b1, b2 = self.cfg.adam_beta1, self.cfg.adam_beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for g in _PARAM_GROUPS:
            grad = getattr(grads, g)
            self.m[g] = b1 * self.m[g] + (1 - b1) * grad
            self.v[g] = b2 * self.v[g] + (1 - b2) * grad * grad
            mhat = self.m[g] / c1
            vhat = self.v[g] / c2
            arr = getattr(splats, g)
            arr -= self.lrs[g] * mhat / (np.sqrt(vhat) + self.cfg.adam_eps)


def init_splats(target, count: int, seed) -> SplatSet:
    """Seed splats: uniform positions, colors sampled from the target,
    isotropic scale diagonal/sqrt(count), opacity 0.5, random depth keys."""
    if count < 1:
        raise ValueError("count must be >= 1")
    arr = as_image_array(target)
    h, w = arr.shape[:2]
    rng = np.random.default_rng(seed)
    xs = rng.uniform(0.0, w, count)
    ys = rng.uniform(0.0, h, count)
    px = np.clip(np.floor(xs).astype(int), 0, w - 1)
    py = np.clip(np.floor(ys).astype(int), 0, h - 1)
    cols = arr[py, px]
    if cols.shape[1] == 1:
        cols = np.repeat(cols, 3, axis=1)
    diag = float(np.hypot(h, w))
    scale = diag / np.sqrt(count)
    return SplatSet(
        positions=np.column_stack([xs, ys]),
        log_scales=np.full((count, 2), np.log(scale)),
        rotations=np.zeros(count),
        colors_raw=_logit(np.clip(cols, 1e-4, 1.0 - 1e-4)),
        opacity_logits=np.zeros(count),
        depth_keys=rng.uniform(0.0, 1.0, count),
    )


def _densify_with_parents(splats: SplatSet, mean_grad: np.ndarray,
                          cfg: TrainConfig, seed, image_diagonal: float):
    """Clone/split/prune; returns the new set and each row's parent index
    (-1 marks a freshly created splat, for optimizer-state remapping)."""
    rng = np.random.default_rng(seed)
    n = splats.n
    mean_grad = np.asarray(mean_grad, dtype=np.float64)
    if mean_grad.shape != (n,):
        raise ValueError("gradient accumulator must be (n,)")
    # Positional gradients arrive in pixel units; the threshold is defined in
    # half-diagonal units so it is resolution independent.
    scaled = mean_grad * (0.5 * image_diagonal)
    candidates = np.flatnonzero(scaled > cfg.densify_grad_threshold)
    # Highest-gradient candidates win when the cap binds.
    budget = max(0, cfg.max_splats - n)
    if len(candidates) > budget:
        order = np.argsort(scaled[candidates])[::-1]
        candidates = candidates[order[:budget]]
    cand = set(int(i) for i in candidates)

    split_threshold = cfg.split_scale_fraction * image_diagonal
    rows = []  # (parent_idx_or_-1, pos, log_s, rot, color, logit, depth)
    for i in range(n):
        pos = splats.positions[i]
        ls = splats.log_scales[i]
        rot = float(splats.rotations[i])
        col = splats.colors_raw[i]
        logit_i = float(splats.opacity_logits[i])
        key = float(splats.depth_keys[i])
        if i in cand:
            major = float(np.exp(ls.max()))
            if major > split_threshold:
                # split: two children along the major axis at +-0.5*s1,
                # scales shrunk by the split factor
                ax = int(np.argmax(ls))
                direction = (np.array([np.cos(rot), np.sin(rot)]) if ax == 0
                             else np.array([-np.sin(rot), np.cos(rot)]))
                offset = 0.5 * major * direction
                child_ls = ls - np.log(cfg.split_factor)
                rows.append((-1, pos + offset, child_ls, rot, col, logit_i,
                             key + 1e-7))
                rows.append((-1, pos - offset, child_ls, rot, col, logit_i,
                             key + 2e-7))
            else:
                # clone: keep the parent, add a jittered copy
                rows.append((i, pos, ls, rot, col, logit_i, key))
                jitter = rng.normal(0.0, 0.1 * major, 2)
                rows.append((-1, pos + jitter, ls, rot, col, logit_i,
                             key + 1e-7))
        else:
            rows.append((i, pos, ls, rot, col, logit_i, key))

    keep = [r for r in rows
            if _opacity_of(r[5]) >= cfg.prune_opacity_threshold]
    if not keep:  # never return an empty model
        keep = rows
    parent_idx = np.array([r[0] for r in keep], dtype=int)
    out = SplatSet(
        positions=np.array([r[1] for r in keep]),
        log_scales=np.array([r[2] for r in keep]),
        rotations=np.array([r[3] for r in keep]),
        colors_raw=np.array([r[4] for r in keep]),
        opacity_logits=np.array([r[5] for r in keep]),
        depth_keys=np.array([r[6] for r in keep]),
    )
    return out, parent_idx


def _opacity_of(logit_value: float) -> float:
    from scipy.special import expit

    return float(expit(logit_value))


def densify_and_prune(splats: SplatSet, grad_accumulator: np.ndarray,
                      cfg: TrainConfig, seed, image_diagonal: float) -> SplatSet:
    """Public densification rule: mean positional-gradient magnitude above the
    threshold clones small splats and splits large ones; low-opacity splats
    are pruned; the total never exceeds cfg.max_splats."""
    out, _ = _densify_with_parents(splats, grad_accumulator, cfg, seed,
                                   image_diagonal)
    return out


def fit(target, init, loss_cfg: LossConfig, train_cfg: TrainConfig,
        seed, dump_dir=None):
    """Optimize splats to reproduce the target image.

    init is either a SplatSet or an integer seed count. Deterministic for a
    fixed seed. Raises DivergenceError (after dumping state when dump_dir is
    given) if the loss goes non-finite.
    """
    t_start = time.time()
    arr = as_image_array(target)
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    h, w = arr.shape[:2]
    diag = float(np.hypot(h, w))

    ss = np.random.SeedSequence(seed)
    init_seed, densify_ss = ss.spawn(2)
    densify_rng = np.random.default_rng(densify_ss)

    if isinstance(init, SplatSet):
        splats = init.copy()
    else:
        splats = init_splats(arr, int(init), init_seed)

    warm_cfg = losses.LossConfig(
        kind="original", ssim_window=loss_cfg.ssim_window,
        ssim_sigma=loss_cfg.ssim_sigma,
    )
    warm_prepared = losses.prepare_target(arr, warm_cfg)
    main_prepared = losses.prepare_target(arr, loss_cfg)

    adam = _Adam(train_cfg, diag)
    adam.init_state(splats)

    iters = train_cfg.iterations
    warmup_end = int(round(train_cfg.warmup_fraction * iters))
    densify_last = int(round(train_cfg.densify_stop_fraction * iters))

    report = TrainReport(gamma=loss_cfg.gamma, loss_kind=loss_cfg.kind,
                         seed=seed if isinstance(seed, int) else None)
    grad_accum = np.zeros(splats.n)
    accum_count = 0

    for it in range(iters):
        warming = it < warmup_end
        cfg_now = warm_cfg if warming else loss_cfg
        prepared = warm_prepared if warming else main_prepared

        out = render(splats, w, h, train_cfg.background)
        value, img_grad = losses.evaluate(arr, out.image.data, cfg_now, prepared)
        if not np.isfinite(value):
            dump_path = None
            if dump_dir is not None:
                dump_path = str(dump_dir) + f"/diverged_iter{it}.spl2"
                save_splats(splats, dump_path,
                            meta={"iteration": it, "loss": loss_cfg.kind})
            raise DivergenceError(f"non-finite loss at iteration {it}",
                                  iteration=it, dump_path=dump_path)
        grads = render_backward(splats, img_grad, train_cfg.background)
        adam.step(splats, grads)

        if it + 1 == warmup_end:
            grad_accum = np.zeros(splats.n)
            accum_count = 0
        else:
            grad_accum += grads.pos_grad_norm
            accum_count += 1

        report.loss_values.append(float(value))
        report.splat_counts.append(splats.n)

        step = it + 1
        if (not warming and step <= densify_last and accum_count > 0
                and step % train_cfg.densify_interval == 0 and step < iters):
            mean_grad = grad_accum / accum_count
            dseed = int(densify_rng.integers(0, 2**63 - 1))
            splats, parents = _densify_with_parents(
                splats, mean_grad, train_cfg, dseed, diag)
            adam.remap(parents)
            grad_accum = np.zeros(splats.n)
            accum_count = 0
            logger.debug("densify at %d: %d splats", step, splats.n)

    final = render(splats, w, h, train_cfg.background)
    report.wall_time_s = time.time() - t_start
    report.final_metrics = final_metrics(arr, final.image.data, loss_cfg)
    return splats, report


def final_metrics(target, rendered, loss_cfg: LossConfig | None = None) -> dict:
    """PSNR / SSIM / pooled distortion at sigma 0 and 4 for a render."""
    cfg = loss_cfg or LossConfig()
    base = LossConfig(kind="wd", bank=cfg.bank)
    m = {
        "psnr": psnr(target, rendered),
        "ssim": 1.0 - losses.loss_ssim(target, rendered, cfg)[0],
        "wd_sigma0": losses.loss_wd(
            target, rendered, LossConfig(kind="wd", sigma=0.0, bank=base.bank))[0],
        "wd_sigma4": losses.loss_wd(
            target, rendered, LossConfig(kind="wd", sigma=4.0, bank=base.bank))[0],
    }
    return m
