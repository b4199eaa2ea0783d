"""Command-line entry point.

Precedence for every setting: built-in defaults, then a JSON config file
(--config), then explicit flags. Exit codes: 0 success, 1 usage error,
2 runtime error. The SPLATPERC_THREADS environment variable caps worker
threads (0 = auto); the numerics are currently single-threaded, so any cap
is honored trivially.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis, losses, ratecodec, trainer
from .elo import elo_fit, elo_to_preference_ratio
from .errors import SplatpercError
from .image_io import ImageBuffer, load_image, psnr, save_image
from .losses import LossConfig, SigmaMap
from .splat_render import SplatSet, load_splats, render, render_backward, save_splats
from .trainer import TrainConfig, fit


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def worker_threads() -> int:
    """Thread cap from SPLATPERC_THREADS (0 = auto)."""
    try:
        n = int(os.environ.get("SPLATPERC_THREADS", "0"))
    except ValueError:
        return 0
    return max(0, n)


_LOSS_KEYS = ("kind", "gamma", "beta", "sigma", "ssim_window", "ssim_sigma")
_TRAIN_KEYS = (
    "iterations", "warmup_fraction", "densify_interval",
    "densify_grad_threshold", "split_scale_fraction", "split_factor",
    "prune_opacity_threshold", "densify_stop_fraction", "max_splats",
)


def _merge(defaults: dict, config: dict, flags: dict) -> dict:
    out = dict(defaults)
    out.update({k: v for k, v in config.items() if k in defaults})
    out.update({k: v for k, v in flags.items() if v is not None and k in defaults})
    return out


def _load_config_file(path):
    if not path:
        return {}
    return json.loads(Path(path).read_text())


def _loss_cfg_from(args, cfg_file: dict) -> LossConfig:
    defaults = {"kind": "original", "gamma": 0.025, "beta": 1.0 / 0.09,
                "sigma": 4.0, "ssim_window": 11, "ssim_sigma": 1.5}
    flags = {"kind": getattr(args, "loss", None),
             "gamma": getattr(args, "gamma", None),
             "beta": getattr(args, "beta", None),
             "sigma": getattr(args, "sigma", None),
             "ssim_window": None, "ssim_sigma": None}
    merged = _merge(defaults, cfg_file.get("loss", {}), flags)
    sigma_map = None
    sm_path = getattr(args, "sigma_map", None) or cfg_file.get("loss", {}).get("sigma_map")
    if sm_path:
        sigma_map = SigmaMap(np.asarray(json.loads(Path(sm_path).read_text())))
    return LossConfig(sigma_map=sigma_map, **merged)


def _train_cfg_from(args, cfg_file: dict) -> TrainConfig:
    base = TrainConfig()
    defaults = {k: getattr(base, k) for k in _TRAIN_KEYS}
    flags = {
        "iterations": getattr(args, "iters", None),
        "warmup_fraction": getattr(args, "warmup_fraction", None),
        "densify_interval": getattr(args, "densify_interval", None),
        "densify_grad_threshold": getattr(args, "densify_grad_threshold", None),
        "split_scale_fraction": None, "split_factor": None,
        "prune_opacity_threshold": None,
        "densify_stop_fraction": getattr(args, "densify_stop_fraction", None),
        "max_splats": getattr(args, "max_splats", None),
    }
    merged = _merge(defaults, cfg_file.get("train", {}), flags)
    bg = getattr(args, "background", None) or cfg_file.get("train", {}).get("background")
    if bg is not None:
        if isinstance(bg, str):
            bg = tuple(float(v) for v in bg.split(","))
        merged["background"] = tuple(bg)
    return TrainConfig(**merged)


def _add_fit_flags(p):
    p.add_argument("--target", required=True, help="target image (PNG/PPM/PGM)")
    p.add_argument("--out", default="fit.spl2", help="checkpoint path [fit.spl2]")
    p.add_argument("--report", help="write the training report JSON here")
    p.add_argument("--config", help="JSON config file {loss: {...}, train: {...}}")
    p.add_argument("--loss", choices=("original", "composite", "wd", "wd_r"),
                   help="loss kind [original]")
    p.add_argument("--gamma", type=float, help="global scale for wd kinds [0.025]")
    p.add_argument("--beta", type=float, help="wd_r regularizer weight [11.111]")
    p.add_argument("--sigma", type=float, help="pooling width, level-0 px [4]")
    p.add_argument("--sigma-map", dest="sigma_map",
                   help="JSON file with a per-pixel sigma array")
    p.add_argument("--iters", type=int, help="iterations [2000]")
    p.add_argument("--seed", type=int, default=0, help="rng seed [0]")
    p.add_argument("--seed-count", type=int, default=64,
                   help="initial splat count [64]")
    p.add_argument("--warmup-fraction", type=float, help="[0.15]")
    p.add_argument("--densify-interval", type=int, help="[100]")
    p.add_argument("--densify-grad-threshold", type=float, help="[2e-4]")
    p.add_argument("--densify-stop-fraction", type=float, help="[0.5]")
    p.add_argument("--max-splats", type=int, help="[4000]")
    p.add_argument("--background", help="r,g,b in [0,1] [0,0,0]")


def build_parser() -> _Parser:
    p = _Parser(prog="splatperc", description=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    fp = sub.add_parser("fit", help="optimize splats against a target image")
    _add_fit_flags(fp)

    rp = sub.add_parser("render", help="render a checkpoint")
    rp.add_argument("--splats", required=True)
    rp.add_argument("--width", type=int, required=True)
    rp.add_argument("--height", type=int, required=True)
    rp.add_argument("--background", default="0,0,0")
    rp.add_argument("--out", required=True)

    ep = sub.add_parser("eval", help="metrics of a checkpoint or render vs target")
    ep.add_argument("--target", required=True)
    ep.add_argument("--splats")
    ep.add_argument("--render", dest="render_path")
    ep.add_argument("--background", default="0,0,0")

    kp = sub.add_parser("erank", help="effective-rank histogram of a checkpoint")
    kp.add_argument("--splats", required=True)
    kp.add_argument("--bins", type=int, default=50)
    kp.add_argument("--out-prefix", help="write <prefix>.json and <prefix>.txt")

    sp = sub.add_parser("rd-sweep", help="rate-distortion sweep over lambda")
    _add_fit_flags(sp)
    sp.add_argument("--lambdas", help="comma list [3^-2,3^-3,3^-4,3^-5]")
    sp.add_argument("--outdir", default="rd_out")

    cp = sub.add_parser("encode", help="entropy-code a checkpoint")
    cp.add_argument("--splats", required=True)
    cp.add_argument("--model", required=True, help="RateModel JSON")
    cp.add_argument("--out", required=True)

    dp = sub.add_parser("decode", help="decode an SPQ1 stream to a checkpoint")
    dp.add_argument("--infile", "--in", dest="infile", required=True)
    dp.add_argument("--out", required=True)

    vp = sub.add_parser("study-serve", help="run the preference-study service")
    vp.add_argument("--config", required=True, help="study config JSON")
    vp.add_argument("--host", default="127.0.0.1")
    vp.add_argument("--port", type=int, default=8000)

    lp = sub.add_parser("elo-report", help="rating table from a vote log")
    lp.add_argument("--votes", required=True)
    lp.add_argument("--prior-scale", type=float, default=2.0)
    lp.add_argument("--out", help="write JSON here instead of stdout")

    sub.add_parser("selftest", help="run the oracle and gradient self-checks")
    return p


def _cmd_fit(args) -> int:
    cfg_file = _load_config_file(args.config)
    loss_cfg = _loss_cfg_from(args, cfg_file)
    train_cfg = _train_cfg_from(args, cfg_file)
    target = load_image(args.target)
    splats, report = fit(target.data, args.seed_count, loss_cfg, train_cfg,
                         args.seed, dump_dir=str(Path(args.out).parent))
    meta = {
        "loss": json.loads(loss_cfg.to_json()),
        "train": json.loads(train_cfg.to_json()),
        "seed": args.seed,
        "target": str(args.target),
        "iterations": train_cfg.iterations,
        "final_metrics": report.final_metrics,
    }
    save_splats(splats, args.out, meta=meta)
    if args.report:
        Path(args.report).write_text(report.to_json())
        Path(args.report).with_suffix(".csv").write_text(report.to_csv())
    print(json.dumps({"out": str(args.out), "splats": splats.n,
                      **report.final_metrics}))
    return 0


def _parse_bg(text):
    return tuple(float(v) for v in text.split(","))


def _cmd_render(args) -> int:
    splats = load_splats(args.splats)
    out = render(splats, args.width, args.height, _parse_bg(args.background))
    save_image(out.image.clamped(), args.out)
    print(json.dumps({"out": str(args.out), "splats": splats.n}))
    return 0


def _cmd_eval(args) -> int:
    target = load_image(args.target)
    if args.splats:
        splats = load_splats(args.splats)
        img = render(splats, target.width, target.height,
                     _parse_bg(args.background)).image.data
    elif args.render_path:
        img = load_image(args.render_path).data
    else:
        raise _UsageError("eval needs --splats or --render")
    arr = target.data if target.channels == 3 else target.to_rgb().data
    print(json.dumps(trainer.final_metrics(arr, img)))
    return 0


def _cmd_erank(args) -> int:
    splats = load_splats(args.splats)
    result = analysis.erank_histogram(splats, bins=args.bins)
    summary = {"median": result.median, "mean": result.mean, "n": splats.n}
    if args.out_prefix:
        Path(args.out_prefix + ".json").write_text(json.dumps({
            **summary,
            "bin_edges": result.bin_edges.tolist(),
            "bin_counts": result.bin_counts.tolist(),
            "bin_heights": result.bin_heights.tolist(),
        }))
        Path(args.out_prefix + ".txt").write_text(
            analysis.histogram_as_text(result))
    print(json.dumps(summary))
    return 0


def _cmd_rd_sweep(args) -> int:
    cfg_file = _load_config_file(args.config)
    loss_cfg = _loss_cfg_from(args, cfg_file)
    train_cfg = _train_cfg_from(args, cfg_file)
    lambdas = (tuple(float(v) for v in args.lambdas.split(","))
               if args.lambdas else ratecodec.DEFAULT_LAMBDAS)
    target = load_image(args.target)
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    rows = []
    for lam in sorted(lambdas):
        rd = ratecodec.RdConfig(lam=lam, lambdas=lambdas, train=train_cfg)
        splats, model, report = ratecodec.fit_rd(
            target.data, loss_cfg, rd, args.seed, init=args.seed_count)
        tag = f"lam{lam:.6g}"
        save_splats(splats, outdir / f"{tag}.spl2",
                    meta={"lambda": lam, "seed": args.seed,
                          "loss": json.loads(loss_cfg.to_json())})
        (outdir / f"{tag}.model.json").write_text(model.to_json())
        ratecodec.encode_quantized(splats, model, outdir / f"{tag}.spq1")
        rows.append(report)
    (outdir / "sweep.json").write_text(json.dumps(rows, indent=2))
    with open(outdir / "sweep.csv", "w") as fh:
        keys = list(rows[0].keys())
        fh.write(",".join(keys) + "\n")
        for r in rows:
            fh.write(",".join(str(r[k]) for k in keys) + "\n")
    print(json.dumps(rows))
    return 0


def _cmd_encode(args) -> int:
    splats = load_splats(args.splats)
    model = ratecodec.RateModel.from_json(Path(args.model).read_text())
    size = ratecodec.encode_quantized(splats, model, args.out)
    print(json.dumps({"out": str(args.out), "bytes": size}))
    return 0


def _cmd_decode(args) -> int:
    splats = ratecodec.decode(args.infile)
    save_splats(splats, args.out)
    print(json.dumps({"out": str(args.out), "splats": splats.n}))
    return 0


def _cmd_study_serve(args) -> int:
    from .study_service import StudyConfig, serve

    cfg = StudyConfig.from_json_file(args.config)
    serve(cfg, host=args.host, port=args.port)
    return 0


def _cmd_elo_report(args) -> int:
    from .elo import VoteStore

    store = VoteStore(args.votes)
    if not store.votes:
        raise SplatpercError(f"no votes in {args.votes}")
    table = elo_fit(store.votes, prior_scale=args.prior_scale)
    text = json.dumps(table.as_dict(), indent=2)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    return 0


def _cmd_selftest(args) -> int:
    rows = []

    def check(name, fn):
        try:
            fn()
            rows.append((name, True, ""))
        except Exception as exc:  # noqa: BLE001 - report, don't crash
            rows.append((name, False, str(exc)[:60]))

    rng = np.random.default_rng(0)

    def renderer_fd():
        s = SplatSet(
            positions=np.array([[8.3, 7.1]]), log_scales=np.array([[0.9, 0.4]]),
            rotations=np.array([0.7]), colors_raw=np.array([[0.5, -0.3, 0.1]]),
            opacity_logits=np.array([0.8]), depth_keys=np.array([0.5]))
        u = rng.normal(0, 1, (16, 16, 3))
        g = render_backward(s, u)
        h = 1e-3
        sp = s.copy(); sp.positions[0, 0] += h
        f1 = float((render(sp, 16, 16).image.data * u).sum())
        sp = s.copy(); sp.positions[0, 0] -= h
        f2 = float((render(sp, 16, 16).image.data * u).sum())
        num = (f1 - f2) / (2 * h)
        rel = abs(num - g.positions[0, 0]) / max(abs(num), 1e-9)
        assert rel < 1e-4, f"renderer fd rel {rel:.2e}"

    def loss_fd():
        x = rng.uniform(0, 1, (16, 16, 3))
        d = np.where(rng.random(x.shape) < 0.5, -1, 1) * rng.uniform(0.05, 0.2, x.shape)
        xh = x + d
        bad = (xh < 0) | (xh > 1)
        xh[bad] = x[bad] - d[bad]
        cfg = LossConfig(kind="wd")
        v, g = losses.loss_wd(x, xh, cfg)
        h = 1e-3
        nums, anas = [], []
        for _ in range(24):
            i, j, c = rng.integers(16), rng.integers(16), rng.integers(3)
            p = xh.copy(); p[i, j, c] += h
            f1 = losses.loss_wd(x, p, cfg)[0]
            p = xh.copy(); p[i, j, c] -= h
            f2 = losses.loss_wd(x, p, cfg)[0]
            nums.append((f1 - f2) / (2 * h)); anas.append(g[i, j, c])
        nums = np.array(nums); anas = np.array(anas)
        rel = np.linalg.norm(nums - anas) / np.linalg.norm(anas)
        assert rel < 1e-4, f"wd fd rel {rel:.2e}"

    def erank_oracle():
        assert analysis.erank(np.eye(3)) == 3.0
        assert abs(analysis.erank(np.diag([4.0, 1.0])) - 1.6493) < 1e-4

    def rate_oracle():
        m = ratecodec.RateModel(
            deltas={g: 1.0 for g in ratecodec.GROUPS},
            means={g: 0.0 for g in ratecodec.GROUPS},
            scales={g: 1.0 for g in ratecodec.GROUPS})
        z = SplatSet(positions=np.zeros((1, 2)), log_scales=np.zeros((1, 2)),
                     rotations=np.zeros(1), colors_raw=np.zeros((1, 3)),
                     opacity_logits=np.zeros(1), depth_keys=np.zeros(1))
        bits, _ = ratecodec.rate_bits(z, m, "eval")
        assert abs(bits / 9 - 1.38489) < 1e-3, bits / 9

    def codec_roundtrip():
        n = 50
        s = SplatSet(
            positions=rng.uniform(0, 32, (n, 2)),
            log_scales=rng.normal(0, 0.5, (n, 2)),
            rotations=rng.uniform(-3, 3, n),
            colors_raw=rng.normal(0, 1, (n, 3)),
            opacity_logits=rng.normal(0, 1, n),
            depth_keys=rng.uniform(0, 1, n))
        model = ratecodec.RateModel()
        blob = ratecodec.encode_bytes(s, model)
        dec = ratecodec.decode_bytes(blob)
        ref = ratecodec.dequantize(s.take(s.depth_order()), model)
        assert np.array_equal(dec.positions, ref.positions)

    def elo_anchors():
        for d, v in ((150, 2.37), (72, 1.51), (105.7, 1.84), (223.2, 3.61)):
            assert abs(elo_to_preference_ratio(d) - v) < 0.01

    check("renderer finite differences", renderer_fd)
    check("pooled-distortion finite differences", loss_fd)
    check("erank oracle", erank_oracle)
    check("rate-bits oracle", rate_oracle)
    check("codec round trip", codec_roundtrip)
    check("elo preference anchors", elo_anchors)

    width = max(len(r[0]) for r in rows)
    ok = True
    for name, passed, msg in rows:
        status = "PASS" if passed else f"FAIL  {msg}"
        print(f"{name.ljust(width)}  {status}")
        ok &= passed
    return 0 if ok else 2


_COMMANDS = {
    "fit": _cmd_fit,
    "render": _cmd_render,
    "eval": _cmd_eval,
    "erank": _cmd_erank,
    "rd-sweep": _cmd_rd_sweep,
    "encode": _cmd_encode,
    "decode": _cmd_decode,
    "study-serve": _cmd_study_serve,
    "elo-report": _cmd_elo_report,
    "selftest": _cmd_selftest,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (SplatpercError, OSError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
