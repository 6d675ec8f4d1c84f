"""Command-line interface: ``tintin train | generate | eval | oracle``.

Every command that writes files also writes ``manifest.json`` next to them. Exit codes are
0 on success, 1 when an assertion or metric check fails and 2 on usage or config errors.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import platform
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .diffusion import (
    TrainConfig,
    ToyDataset,
    TrainingDivergedError,
    fingerprint,
    load_checkpoint,
    make_schedule,
    respace,
    sample,
    save_checkpoint,
    to_display,
    train_toy_denoiser,
)
from .diffusion.training import configure_threads
from .edges import EDGE_THRESHOLD, extract_edges, save_edge_map, threshold_edges
from .guidance import ColorCondition, EdgeCondition, GuidanceConfig, GuidanceConfigError, guided_sample
from .imageio import atomic_write_text, read_rgb_png, write_rgb_png
from .losses import loss_ds
from .metrics import MetricsReport, cds, hard_iou, mse, ssim
from .oracle import GmmSpec, LinearCondition, gmm_log_density, gmm_score, run_guided_oracle
from .palette import PaletteParseError, parse_palette, spatial_palette


EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2
SCENARIOS = ("gaussian-1d", "score-fd")
GEN_BATCH = 16


class UsageError(Exception):
    pass


def _manifest(command: str, config: dict, seeds: list[int], outputs: list[str], timings: dict, ckpt: str | None = None) -> dict:
    return {
        "command": command,
        "config": config,
        "seeds": seeds,
        "version": __version__,
        "platform": {"python": platform.python_version(), "numpy": np.__version__, "machine": platform.machine()},
        "checkpoint_sha256": ckpt,
        "timings": timings,
        "outputs": sorted(outputs),
    }


def _write_manifest(out: Path, manifest: dict) -> None:
    atomic_write_text(out / "manifest.json", json.dumps(manifest, sort_keys=True) + "\n")


def _parse_cz(text: str) -> tuple[int, int]:
    try:
        low, high = (int(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"--cz expects LOW:HIGH, got {text!r}") from None
    return low, high


def _vars(args: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")}


# --------------------------------------------------------------------------- train


def cmd_train(args) -> int:
    if args.dataset != "shapes":
        raise UsageError(f"--dataset: only 'shapes' is available, got {args.dataset!r}")
    if args.size % 4 or args.size < 8:
        raise UsageError(f"--size must be a multiple of 4 and at least 8, got {args.size}")
    if args.steps < 1 or args.n_images < 1:
        raise UsageError("--steps and --n-images must be positive")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    dataset = ToyDataset.generate(args.n_images, args.size, seed=args.seed)
    cfg = TrainConfig(
        steps=args.steps, batch_size=args.batch_size, lr=args.lr, seed=args.seed, channels=args.channels
    )
    try:
        result = train_toy_denoiser(dataset, cfg)
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_FAILED
    record = result.record(cfg, dataset)
    digest = save_checkpoint(out / "checkpoint.tint", result.net, result.schedule, record)
    timings = {"train_seconds": time.perf_counter() - t0}
    _write_manifest(
        out,
        _manifest("train", {**_vars(args), "final_loss": result.final_loss}, [args.seed], ["checkpoint.tint"], timings, digest),
    )
    print(f"final loss {result.final_loss:.5f}; checkpoint sha256 {digest}")
    return EXIT_OK


# ------------------------------------------------------------------------ generate


def _guidance_config(args, condition) -> GuidanceConfig:
    if args.palette:
        base = GuidanceConfig.color_defaults()
    elif args.edge_ref:
        base = GuidanceConfig.edge_defaults()
    else:
        raise ValueError("guidance needs a condition")
    fields = {
        "cz_low": args.cz[0] if args.cz else base.cz_low,
        "cz_high": args.cz[1] if args.cz else base.cz_high,
        "repetitions": args.reps if args.reps is not None else base.repetitions,
        "travel_depth": args.travel,
        "step_policy": args.policy,
        "step_scale": args.scale if args.scale is not None else base.step_scale,
        "grad_mode": "through_denoiser" if args.grad == "through" else "skip",
        "sampler": args.sampler,
        "eta": args.eta,
        "clip_x0": args.clip_x0 if args.clip_x0 > 0 else None,
        "condition": condition,
    }
    return GuidanceConfig(**fields)


def cmd_generate(args) -> int:
    if args.palette and args.edge_ref:
        raise UsageError("--palette and --edge-ref are mutually exclusive (one condition per run)")
    if args.n < 1:
        raise UsageError("--n must be positive")
    out = Path(args.out)
    t0 = time.perf_counter()
    denoiser, train_sched, training = load_checkpoint(args.ckpt)
    side = int(training.get("dataset", {}).get("size", 32))
    size = denoiser.config.in_channels, side, side
    sched = respace(train_sched, args.steps) if args.steps != train_sched.T else train_sched
    outputs: list[str] = []
    out.mkdir(parents=True, exist_ok=True)

    condition = None
    if args.palette:
        palette = parse_palette(args.palette)
        condition = ColorCondition(spatial_palette(palette, size[1:], seed=args.seed))
    elif args.edge_ref:
        ref_img = read_rgb_png(args.edge_ref)
        if ref_img.shape[:2] != size[1:]:
            raise UsageError(f"--edge-ref is {ref_img.shape[1]}x{ref_img.shape[0]}, the model generates {size[2]}x{size[1]}")
        ref = threshold_edges(extract_edges(ref_img), EDGE_THRESHOLD)
        save_edge_map(ref, out / "edge_ref.png")
        outputs.append("edge_ref.png")
        condition = EdgeCondition(ref)
    clip = args.clip_x0 if args.clip_x0 > 0 else None
    cfg = None
    if condition is not None:
        try:
            cfg = _guidance_config(args, condition)
            cfg.validate_for(sched, denoiser)
        except GuidanceConfigError as exc:
            raise UsageError(str(exc)) from None

    seeds = [args.seed + i for i in range(args.n)]
    for start in range(0, len(seeds), GEN_BATCH):
        batch = seeds[start : start + GEN_BATCH]
        if cfg is None:
            x = sample(denoiser, sched, size, batch, args.label, args.sampler, args.eta, clip)
            images, trace = to_display(x), None
        else:
            result = guided_sample(denoiser, sched, cfg, batch, size, label=args.label)
            images, trace = result.images, result.trace
        for seed, img in zip(batch, images):
            idx = seed - args.seed
            write_rgb_png(out / f"sample_{idx:03d}.png", img)
            outputs.append(f"sample_{idx:03d}.png")
            if trace is not None:
                atomic_write_text(out / f"sample_{idx:03d}.trace.jsonl", trace.for_seed(seed).to_jsonl())
                outputs.append(f"sample_{idx:03d}.trace.jsonl")
    guidance = cfg.to_record() if cfg is not None else None
    config = {**_vars(args), "guidance": guidance, "sampling_steps": sched.T}
    timings = {"generate_seconds": time.perf_counter() - t0}
    _write_manifest(out, _manifest("generate", config, seeds, outputs, timings, fingerprint(args.ckpt)))
    print(f"wrote {args.n} images to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    if bool(args.palette) == bool(args.edge_ref):
        raise UsageError("eval needs exactly one target: --palette or --edge-ref")
    images = sorted(Path(args.images).glob("sample_*.png"))
    if not images:
        raise UsageError(f"no sample_*.png images in {args.images}")
    images = images[: args.n]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    report = MetricsReport({**_vars(args), "n_evaluated": len(images)})
    if args.palette:
        palette = parse_palette(args.palette)
        for i, path in enumerate(images):
            img = read_rgb_png(path)
            report.add(i, "cds", cds(img, palette), path.name)
            report.add(i, "loss_ds", loss_ds(img, palette).value, path.name)
    else:
        ref_img = read_rgb_png(args.edge_ref)
        ref = threshold_edges(extract_edges(ref_img), EDGE_THRESHOLD)
        for i, path in enumerate(images):
            img = read_rgb_png(path)
            if img.shape != ref_img.shape:
                raise UsageError(f"{path.name} has shape {img.shape}, reference has {ref_img.shape}")
            gen = threshold_edges(extract_edges(img), EDGE_THRESHOLD)
            report.add(i, "iou", hard_iou(gen, ref).value, path.name)
            report.add(i, "ssim", ssim(gen.values, ref.values), path.name)
            report.add(i, "mse", mse(gen.values, ref.values), path.name)
    atomic_write_text(out / "report.jsonl", report.to_jsonl())
    timings = {"eval_seconds": time.perf_counter() - t0}
    _write_manifest(out, _manifest("eval", report.config, list(range(len(images))), ["report.jsonl"], timings))
    print(report.summary_table(), end="")
    return EXIT_OK


# -------------------------------------------------------------------------- oracle


def _oracle_gaussian_1d(args) -> tuple[bool, dict]:
    """Sweep a constant step scale and check the best one against the exact posterior."""
    spec = GmmSpec.gaussian([0.0], [[1.0]])
    cond = LinearCondition([[1.0]], [1.0], 1.0)
    sched = make_schedule(1000, "linear")
    rows = []
    for scale in np.geomspace(0.0012, 0.004, args.sweep):
        cfg = GuidanceConfig(
            cz_low=1, cz_high=1000, repetitions=1, step_policy="constant", step_scale=float(scale), sampler="ddpm"
        )
        stats = run_guided_oracle(spec, cond, cfg, args.n, args.seed, sched)
        m, v = float(stats.mean[0]), float(stats.cov[0, 0])
        em, ev = float(stats.expected_mean[0]), float(stats.expected_cov[0, 0])
        w2 = float(np.hypot(m - em, np.sqrt(v) - np.sqrt(ev)))
        rows.append({"scale": float(scale), "mean": m, "var": v, "w2": w2})
        print(f"scale {scale:.5f}  mean {m:+.4f}  var {v:.4f}  W2 {w2:.4f}")
    best = min(rows, key=lambda r: r["w2"])
    ok = abs(best["mean"] - 0.5) < 0.05 and abs(best["var"] - 0.5) < 0.1
    print(f"best scale {best['scale']:.5f}: mean {best['mean']:.4f} (target 0.5 +- 0.05), "
          f"var {best['var']:.4f} (target 0.5 +- 0.1) -> {'PASS' if ok else 'FAIL'}")
    return ok, {"sweep": rows, "best": best, "expected": {"mean": 0.5, "var": 0.5}}


def _oracle_score_fd(args) -> tuple[bool, dict]:
    spec = GmmSpec(
        [0.3, 0.7],
        [[-1.0, 0.5], [1.5, -0.5]],
        [[[0.5, 0.1], [0.1, 0.3]], [[0.2, -0.05], [-0.05, 0.4]]],
    )
    sched = make_schedule(100)
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    h = 1e-5
    for t in (1, 10, 50, 90, 100):
        for x in rng.standard_normal((8, 2)):
            score, _ = gmm_score(spec, x, t, sched)
            fd = np.array([
                (gmm_log_density(spec, x + h * e, t, sched) - gmm_log_density(spec, x - h * e, t, sched)) / (2 * h)
                for e in np.eye(2)
            ])
            worst = max(worst, float(np.linalg.norm(score - fd) / max(np.linalg.norm(fd), 1e-12)))
    ok = worst < 1e-6
    print(f"score vs finite differences: worst relative error {worst:.3e} (bound 1e-6) -> {'PASS' if ok else 'FAIL'}")
    return ok, {"worst_rel_err": worst}


def cmd_oracle(args) -> int:
    runners = {"gaussian-1d": _oracle_gaussian_1d, "score-fd": _oracle_score_fd}
    if args.scenario not in runners:
        raise UsageError(f"unknown scenario {args.scenario!r}; available: {', '.join(SCENARIOS)}")
    t0 = time.perf_counter()
    ok, report = runners[args.scenario](args)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        atomic_write_text(out / "oracle.json", json.dumps({"scenario": args.scenario, "pass": ok, **report}, sort_keys=True) + "\n")
        timings = {"oracle_seconds": time.perf_counter() - t0}
        _write_manifest(out, _manifest("oracle", _vars(args), [args.seed], ["oracle.json"], timings))
    return EXIT_OK if ok else EXIT_FAILED


# -------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tintin", description="Energy-guided colour and edge control for diffusion sampling.")
    parser.add_argument("--version", action="version", version=f"tintin {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, func, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="INI file; keys of the [%s] section mirror the flags" % name)
        p.set_defaults(func=func)
        return p

    p = add("train", cmd_train, "train the toy shapes denoiser")
    p.add_argument("--dataset", default="shapes")
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--n-images", type=int, default=4096)
    p.add_argument("--steps", type=int, default=4000)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")

    p = add("generate", cmd_generate, "sample images, optionally guided by a palette or an edge reference")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--palette", help='comma-separated hex colours, e.g. "#ff0000,#0000ff"')
    p.add_argument("--edge-ref", help="reference PNG whose edges guide sampling")
    p.add_argument("--cz", type=_parse_cz, help="conditioning zone LOW:HIGH (default per condition)")
    p.add_argument("--reps", type=int, help="repetitions per guided timestep (default per condition)")
    p.add_argument("--travel", type=int, default=1, help="levels re-noised between repetitions")
    p.add_argument("--scale", type=float, help="guidance step scale (default per condition)")
    p.add_argument("--policy", choices=("normalized", "constant"), default="normalized")
    p.add_argument("--grad", choices=("through", "skip"), default="through")
    p.add_argument("--sampler", choices=("ddim", "ddpm"), default="ddim")
    p.add_argument("--steps", type=int, default=100, help="sampling steps")
    p.add_argument("--eta", type=float, default=0.0)
    p.add_argument("--clip-x0", type=float, default=1.0, help="clip the clean prediction in updates; 0 disables")
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--label", type=int, help="shape class (0 circle, 1 square, 2 triangle)")

    p = add("eval", cmd_eval, "score generated images against a palette or an edge reference")
    p.add_argument("--images", required=True, help="directory with sample_*.png")
    p.add_argument("--palette")
    p.add_argument("--edge-ref")
    p.add_argument("--n", type=int, default=7, help="number of seeds (images) to evaluate")
    p.add_argument("--out", required=True, help="output directory")

    p = add("oracle", cmd_oracle, "analytic Gaussian-mixture checks of the guidance maths")
    p.add_argument("--scenario", required=True, help=f"one of: {', '.join(SCENARIOS)}")
    p.add_argument("--n", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sweep", type=int, default=7, help="number of step scales tried")
    p.add_argument("--out", help="optional output directory for the report")
    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    """Parse ``argv`` with the ``[command]`` section of ``--config`` as defaults."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    command = next((a for a in argv if a in sub.choices), None)
    if known.config and command is not None:
        ini = configparser.ConfigParser()
        if not ini.read(known.config):
            raise UsageError(f"cannot read config file {known.config}")
        if ini.has_section(command):
            subparser = sub.choices[command]
            actions = {a.dest: a for a in subparser._actions}
            defaults = {}
            for key, value in ini.items(command):
                dest = key.replace("-", "_")
                if dest not in actions or dest in ("help", "config"):
                    raise UsageError(f"unknown key {key!r} in [{command}] of {known.config}")
                action = actions[dest]
                try:
                    defaults[dest] = action.type(value) if action.type else value
                except (ValueError, argparse.ArgumentTypeError) as exc:
                    raise UsageError(f"bad value for {key!r} in {known.config}: {exc}") from None
                action.required = False
            subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config_file(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        configure_threads()
        return args.func(args)
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    except (UsageError, PaletteParseError, GuidanceConfigError) as exc:
        print(f"tintin: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"tintin: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
