"""Command-line driver: synthetic data generation, training, gradient
checking, inference, evaluation, and the four-variant ablation run.

Config precedence is built-in defaults < config file (key=value lines) <
command-line flags; the environment variable A2CLPT_SEED overrides the
default seed only. Every command that writes outputs also writes the fully
resolved configuration next to them. Exit codes: 0 success, 1 runtime
failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .data import Dataset, DatasetError, SynthConfig, load_dataset, synth_generate, write_dataset
from .evaluator import map_over_thresholds, parse_grid
from .localizer import localize, read_detections, write_detections
from .model import load_checkpoint
from .trainer import TrainConfig, gradcheck, train

VARIANTS = ("atcl", "atcl_plus", "aclpt", "a2clpt")

_ENV_SEED = "A2CLPT_SEED"


class UsageError(Exception):
    """Bad flags or config contents; maps to exit code 2."""


# TrainConfig fields exposed as flags (kebab-case) and config-file keys.
_TRAIN_FIELDS: list[tuple[str, type]] = [
    ("alpha", float), ("gamma", float), ("m1", float), ("m2", float),
    ("s", float), ("s_a", float), ("omega", float),
    ("batch_size", int), ("adam_lr", float), ("weight_decay", float),
    ("center_lr_rgb", float), ("center_lr_flow", float),
    ("iterations", int), ("seed", int), ("checkpoint_every", int),
    ("embed_dim", int), ("kernel_size", int),
    ("beta_low", float), ("beta_high", float),
]


def _default_train_values() -> dict:
    cfg = TrainConfig()
    values = {name: getattr(cfg, name) for name, _ in _TRAIN_FIELDS if hasattr(cfg, name)}
    values["beta_low"], values["beta_high"] = cfg.beta_range
    values["center_gamma_scaled"] = cfg.center_gamma_scaled
    return values


def _parse_config_file(path: Path) -> dict:
    known = {name for name, _ in _TRAIN_FIELDS} | {"variant", "center_gamma_scaled"}
    types = dict(_TRAIN_FIELDS)
    out: dict = {}
    for raw in path.read_text(encoding="utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line is not key=value: {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in known:
            raise UsageError(f"unknown config key {key!r}")
        if key == "variant":
            if value not in VARIANTS:
                raise UsageError(f"unknown variant {value!r}")
            out[key] = value
        elif key == "center_gamma_scaled":
            out[key] = value.lower() in ("1", "true", "yes")
        else:
            try:
                out[key] = types[key](value)
            except ValueError as exc:
                raise UsageError(f"bad value for {key}: {value!r}") from exc
    return out


def _resolve_train_config(args) -> tuple[TrainConfig, str]:
    values = _default_train_values()
    env_seed = os.environ.get(_ENV_SEED)
    if env_seed is not None:
        try:
            values["seed"] = int(env_seed)
        except ValueError as exc:
            raise UsageError(f"{_ENV_SEED} must be an integer, got {env_seed!r}") from exc
    variant = "a2clpt"
    if getattr(args, "config", None):
        file_values = _parse_config_file(Path(args.config))
        variant = file_values.pop("variant", variant)
        values.update(file_values)
    for name, _ in _TRAIN_FIELDS:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    if getattr(args, "no_center_gamma_scale", False):
        values["center_gamma_scaled"] = False
    if getattr(args, "variant", None):
        variant = args.variant

    values["beta_range"] = (values.pop("beta_low"), values.pop("beta_high"))
    cfg = TrainConfig(**values)
    if variant == "atcl":
        cfg = TrainConfig(**{**asdict(cfg), "gamma": 0.0, "two_branch": False})
    elif variant == "atcl_plus":
        cfg = TrainConfig(**{**asdict(cfg), "gamma": 0.0, "two_branch": True})
    elif variant == "aclpt":
        cfg = TrainConfig(**{**asdict(cfg), "two_branch": False})
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return cfg, variant


def _echo_config(out_dir: Path, entries: dict) -> None:
    lines = [f"{key} = {entries[key]}" for key in sorted(entries)]
    (out_dir / "config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _train_echo_entries(cfg: TrainConfig, variant: str, **extra) -> dict:
    entries = asdict(cfg)
    entries["beta_low"], entries["beta_high"] = entries.pop("beta_range")
    entries["variant"] = variant
    entries.update(extra)
    return entries


def _resolve_seed(flag_seed, default: int) -> int:
    if flag_seed is not None:
        return flag_seed
    env_seed = os.environ.get(_ENV_SEED)
    if env_seed is not None:
        try:
            return int(env_seed)
        except ValueError as exc:
            raise UsageError(f"{_ENV_SEED} must be an integer, got {env_seed!r}") from exc
    return default


def _gt_tuples(ds: Dataset) -> list[tuple[str, int, int, int]]:
    return [(s.id, cls, start, end) for s in ds.samples for (cls, start, end) in s.gt_segments]


# --- subcommands --------------------------------------------------------------


def cmd_synth(args) -> int:
    out_dir = Path(args.out)
    manifest = out_dir / "manifest.txt"
    if manifest.exists() and not args.force:
        raise RuntimeError(f"{manifest} already exists; pass --force to overwrite")
    cfg = SynthConfig(
        num_classes=args.classes,
        feature_dim=args.feature_dim,
        num_videos=args.num_videos,
        len_range=(args.len_min, args.len_max),
        segments_range=(args.segments_min, args.segments_max),
        noise_sigma=args.sigma,
        background_direction=not args.no_background_direction,
        seed=_resolve_seed(args.seed, SynthConfig().seed),
    )
    ds = synth_generate(cfg)
    path = write_dataset(ds, out_dir)
    _echo_config(out_dir, {**asdict(cfg), "out": out_dir})
    print(path)
    return 0


def cmd_train(args) -> int:
    cfg, variant = _resolve_train_config(args)
    ds = load_dataset(args.dataset)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    params, bank, log = train(ds, cfg, out_dir)
    _echo_config(out_dir, _train_echo_entries(cfg, variant, dataset=args.dataset, out=out_dir))
    if log.records:
        first, last = log.records[0].breakdown.total, log.records[-1].breakdown.total
        print(f"trained {cfg.iterations} iterations: total loss {first:.4f} -> {last:.4f}")
        from .report import save_loss_curves
        save_loss_curves(out_dir / "loss_curves.png", log)
    else:
        print("wrote initialization checkpoint (0 iterations)")
    print(out_dir / "checkpoint.bin")
    return 0


def cmd_infer(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.dataset)
    if ckpt.params.num_classes != ds.num_classes:
        raise RuntimeError(
            f"checkpoint has {ckpt.params.num_classes} classes but dataset has {ds.num_classes}")
    if ckpt.params.feature_dim != ds.feature_dim:
        raise RuntimeError(
            f"checkpoint expects feature dim {ckpt.params.feature_dim} but dataset has {ds.feature_dim}")
    s = args.s if args.s is not None else ckpt.s
    s_a = args.s_a if args.s_a is not None else ckpt.s_a
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    def run(sample):
        return localize(sample, ckpt.params, s, s_a, args.min_seg_len, ckpt.two_branch)

    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            results = list(pool.map(run, ds.samples))
    else:
        results = [run(sample) for sample in ds.samples]
    per_video = [(sample.id, dets) for sample, dets in zip(ds.samples, results)]
    path = write_detections(out_dir / "detections.tsv", per_video)
    for vid, dets in per_video:
        print(f"{vid}: {len(dets)} detections", file=sys.stderr)
    _echo_config(out_dir, {
        "checkpoint": args.checkpoint, "dataset": args.dataset, "out": out_dir,
        "s": s, "s_a": s_a, "min_seg_len": args.min_seg_len,
        "threads": args.threads, "two_branch": ckpt.two_branch,
    })
    print(path)
    return 0


def _parse_grid_flag(spec: str) -> list[float]:
    try:
        return parse_grid(spec)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_eval(args) -> int:
    ds = load_dataset(args.dataset)
    dets = read_detections(args.detections)
    for vid, det in dets:
        if not 0 <= det.cls < ds.num_classes:
            raise RuntimeError(
                f"detection for video {vid} names class {det.cls + 1}, "
                f"but the dataset has {ds.num_classes} classes")
    grid = _parse_grid_flag(args.grid)
    report = map_over_thresholds(dets, _gt_tuples(ds), grid)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.txt").write_text("\n".join(report.table_lines()) + "\n", encoding="utf-8")
    (out_dir / "report.tsv").write_text("\n".join(report.tsv_lines()) + "\n", encoding="utf-8")
    from .report import save_map_curve
    save_map_curve(out_dir / "map_iou.png", report)
    _echo_config(out_dir, {
        "detections": args.detections, "dataset": args.dataset,
        "grid": args.grid, "out": out_dir,
    })
    print("\n".join(report.table_lines()))
    return 0


def cmd_gradcheck(args) -> int:
    seed = _resolve_seed(args.seed, 0)
    report = gradcheck(seed=seed, instances=args.instances, eps=args.eps)
    print(f"gradcheck: seed={seed} instances={args.instances} eps={args.eps} tolerance={args.tolerance}")
    print("\n".join(report.lines(args.tolerance)))
    if report.passed(args.tolerance):
        print("gradcheck PASSED")
        return 0
    print("gradcheck FAILED", file=sys.stderr)
    return 1


def cmd_ablate(args) -> int:
    base_seed = _resolve_seed(args.seed, TrainConfig().seed)
    grid = _parse_grid_flag(args.grid)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports: dict[str, list] = {v: [] for v in VARIANTS}
    tsv = ["variant\tseed\t" + "\t".join(f"map_{t:.2f}" for t in grid) + "\tavg_map"]
    for variant in VARIANTS:
        for i in range(args.seeds):
            seed = base_seed + i
            # Benchmark videos carry a salient core inside every activity
            # segment, so completeness (the adversarial branch's job) is
            # required to localize full segments. The masking ratio shrinks
            # with the video lengths so that the same number of columns is
            # erased as at full scale.
            synth_cfg = SynthConfig(
                num_classes=args.classes,
                feature_dim=args.feature_dim,
                num_videos=args.num_videos,
                len_range=(28, 36),
                segments_range=(1, 2),
                seg_len_range=(9, 12),
                noise_sigma=args.sigma,
                salient_core=True,
                seed=seed,
            )
            ds = synth_generate(synth_cfg)
            ns = argparse.Namespace(**{name: None for name, _ in _TRAIN_FIELDS},
                                    config=None, variant=variant, no_center_gamma_scale=False)
            ns.iterations = args.iterations
            ns.seed = seed
            ns.s_a = args.s_a
            cfg, _ = _resolve_train_config(ns)
            params, _, _ = train(ds, cfg)
            per_video = [
                (s.id, localize(s, params, cfg.s, cfg.s_a, args.min_seg_len, cfg.two_branch))
                for s in ds.samples
            ]
            flat = [(vid, d) for vid, dets in per_video for d in dets]
            rep = map_over_thresholds(flat, _gt_tuples(ds), grid)
            reports[variant].append(rep)
            tsv.append(f"{variant}\t{seed}\t"
                       + "\t".join(f"{v:.6f}" for v in rep.map_per_threshold)
                       + f"\t{rep.average_map:.6f}")
            print(f"{variant} seed={seed}: avg mAP {rep.average_map:.4f}", file=sys.stderr)

    means = {
        v: np.mean([r.average_map for r in reports[v]]) for v in VARIANTS
    }
    per_thr_means = {
        v: np.mean([r.map_per_threshold for r in reports[v]], axis=0) for v in VARIANTS
    }
    for v in VARIANTS:
        tsv.append(f"{v}\tmean\t"
                   + "\t".join(f"{x:.6f}" for x in per_thr_means[v])
                   + f"\t{means[v]:.6f}")
    (out_dir / "ablation.tsv").write_text("\n".join(tsv) + "\n", encoding="utf-8")

    show = [t for t in (0.3, 0.4, 0.5, 0.6, 0.7) if any(abs(t - g) < 1e-9 for g in grid)]
    head = f"{'variant':>10s}" + "".join(f"{t:>9.2f}" for t in show) + f"{'AVG':>9s}"
    table = [head]
    for v in VARIANTS:
        cells = "".join(f"{per_thr_means[v][grid.index(t)]:>9.4f}" for t in show)
        table.append(f"{v:>10s}" + cells + f"{means[v]:>9.4f}")
    (out_dir / "ablation.txt").write_text("\n".join(table) + "\n", encoding="utf-8")
    from .report import save_ablation_bars
    save_ablation_bars(out_dir / "ablation.png", [(v, float(means[v])) for v in VARIANTS])
    _echo_config(out_dir, {
        "seeds": args.seeds, "seed": base_seed, "iterations": args.iterations,
        "classes": args.classes, "feature_dim": args.feature_dim,
        "num_videos": args.num_videos, "sigma": args.sigma,
        "grid": args.grid, "min_seg_len": args.min_seg_len, "out": out_dir,
    })
    print("\n".join(table))
    return 0


# --- parser -------------------------------------------------------------------


def _add_synth_flags(p: argparse.ArgumentParser, defaults: SynthConfig) -> None:
    p.add_argument("--classes", type=int, default=defaults.num_classes)
    p.add_argument("--feature-dim", type=int, default=defaults.feature_dim)
    p.add_argument("--num-videos", type=int, default=defaults.num_videos)
    p.add_argument("--sigma", type=float, default=defaults.noise_sigma)
    p.add_argument("--seed", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="a2clpt",
        description="Weakly-supervised temporal activity localization toolkit.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset on disk")
    _add_synth_flags(p, SynthConfig())
    p.add_argument("--len-min", type=int, default=SynthConfig().len_range[0])
    p.add_argument("--len-max", type=int, default=SynthConfig().len_range[1])
    p.add_argument("--segments-min", type=int, default=SynthConfig().segments_range[0])
    p.add_argument("--segments-max", type=int, default=SynthConfig().segments_range[1])
    p.add_argument("--no-background-direction", action="store_true")
    p.add_argument("--force", action="store_true", help="overwrite an existing dataset")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a dataset manifest")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--variant", choices=VARIANTS, default=None)
    p.add_argument("--no-center-gamma-scale", action="store_true",
                   help="drop the gamma weight on the second-hinge center term")
    for name, typ in _TRAIN_FIELDS:
        p.add_argument(f"--{name.replace('_', '-')}", type=typ, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="localize activities with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-seg-len", type=int, default=2, choices=(2, 3))
    p.add_argument("--s", type=float, default=None, help="override the checkpoint's pooling ratio")
    p.add_argument("--s-a", type=float, default=None, help="override the checkpoint's masking ratio")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score detections against ground truth")
    p.add_argument("--detections", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", default="0.1:0.1:0.9", help="IoU thresholds as start:step:stop")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="verify analytic gradients with finite differences")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--instances", type=int, default=5)
    p.add_argument("--eps", type=float, default=1e-6)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="run the four ablation variants and compare")
    _add_synth_flags(p, SynthConfig())
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--iterations", type=int, default=2000)
    p.add_argument("--s-a", type=float, default=6.0,
                   help="masking ratio for the benchmark (smaller than the full-scale "
                        "default so the erased column count matches hour-scale videos)")
    p.add_argument("--grid", default="0.1:0.1:0.9")
    p.add_argument("--min-seg-len", type=int, default=2, choices=(2, 3))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
