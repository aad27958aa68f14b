"""Command line entry point: ``gmsr <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 verification failure.
"""

from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .ablation import as_arrays, parse_toggles, run_ablation, split_pairs
from .bench import CSV_HEADER as BENCH_HEADER
from .bench import DEFAULT_CHANNELS, DEFAULT_SIZES, DEFAULT_STATE, benchmark, ratios_within
from .data import (
    DataFormatError,
    cube_read,
    cube_write,
    HsiCube,
    load_pairs,
    read_ppm,
    synth_dataset,
    write_dataset_manifest,
    write_ppm,
)
from .evaluate import (
    evaluate_baseline,
    evaluate_model,
    write_heatmaps,
    write_metrics_csv,
    write_spectral_curves,
)
from .model import CheckpointError, GmsrConfig, GmsrNet, load_checkpoint, param_count, save_checkpoint
from .train import TrainConfig, train
from .verify import run_checks

log = logging.getLogger("gmsr")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def version_string() -> str:
    try:
        desc = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5,
        )
        if desc.returncode == 0 and desc.stdout.strip():
            return f"{__version__}+g{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def write_manifest(out_dir: Path, args: argparse.Namespace, started: str, outputs: dict,
                   config: dict | None = None, extra: dict | None = None) -> Path:
    manifest = {
        "command": args.command,
        "args": {k: (str(v) if isinstance(v, Path) else v)
                 for k, v in vars(args).items() if k != "func"},
        "seed": getattr(args, "seed", None),
        "config": config,
        "version": version_string(),
        "started": started,
        "finished": _now(),
        "outputs": outputs,
    }
    if extra:
        manifest.update(extra)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _out_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataFormatError(f"cannot create output directory {p}: {exc.strerror}") from exc
    return p


def _config_dict(path) -> dict:
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"cannot read config {path}: {exc}") from exc


def _load_config(path, **overrides) -> GmsrConfig:
    base = _config_dict(path)
    for k, v in overrides.items():
        if v is not None:
            base[k] = v
    try:
        return GmsrConfig.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc


def _eval_pairs(manifest):
    return [(name, rgb, cube.array()) for name, rgb, cube in load_pairs(manifest)]


# ---------------------------------------------------------------- subcommands


def cmd_synth(args) -> int:
    started = _now()
    out = _out_dir(args.out)
    pairs = synth_dataset(args.count, args.size, args.size, args.bands, args.seed)
    entries, files = [], []
    for i, pair in enumerate(pairs):
        cube_name, rgb_name = f"sample_{i:04d}.hsc", f"sample_{i:04d}.ppm"
        cube_write(pair.cube, out / cube_name)
        write_ppm(out / rgb_name, pair.rgb)
        entries.append((rgb_name, cube_name))
        files += [cube_name, rgb_name]
    write_dataset_manifest(out / "dataset.txt", entries)
    write_manifest(out, args, started, {"dataset": "dataset.txt", "files": files},
                   extra={"curvature_bounds": [p.curvature_bound for p in pairs]})
    print(out / "dataset.txt")
    return EXIT_OK


def cmd_train(args) -> int:
    started = _now()
    pairs = load_pairs(args.data)
    bands = pairs[0][2].bands
    # The band count comes from the data unless the config file pins it.
    pinned = _config_dict(args.config).get("out_channels")
    cfg = _load_config(args.config, feature_width=args.feature_width, num_blocks=args.blocks,
                       state_size=args.state_size, seed=args.seed,
                       out_channels=None if pinned is not None else bands)
    if cfg.out_channels != bands:
        raise DataFormatError(f"config emits {cfg.out_channels} bands but data has {bands}")
    out = _out_dir(args.out)
    model = GmsrNet(cfg)
    tcfg = TrainConfig(steps=args.steps, batch=args.batch, patch=args.patch, lr0=args.lr,
                       seed=args.seed)
    result = train(model, [(rgb, cube.array()) for _, rgb, cube in pairs], tcfg,
                   log_every=args.log_every)
    save_checkpoint(model, out / "checkpoint.gmsr")
    (out / "loss.csv").write_text(result.to_csv(), encoding="utf-8")
    write_manifest(out, args, started, {"checkpoint": "checkpoint.gmsr", "loss": "loss.csv"},
                   config=json.loads(cfg.to_json()),
                   extra={"train": vars(tcfg), "param_count": param_count(cfg)})
    print(out / "checkpoint.gmsr")
    return EXIT_OK


def cmd_eval(args) -> int:
    started = _now()
    expected = _load_config(args.config) if args.config else None
    model = load_checkpoint(args.ckpt, expected)
    pairs = _eval_pairs(args.data)
    wavelengths = load_pairs(args.data)[0][2].wavelengths_nm
    out = _out_dir(args.report)
    results = evaluate_model(model, pairs)
    rows = [(name, rep) for name, _, rep in results]
    if args.baseline_data:
        train_pairs = [(rgb, cube) for _, rgb, cube in _eval_pairs(args.baseline_data)]
        rows += [(f"baseline/{name}", rep) for name, _, rep in evaluate_baseline(train_pairs, pairs)]
    write_metrics_csv(out / "metrics.csv", rows)
    scales, curves = {}, []
    for (name, pred, rep), (_, _, ref) in zip(results, pairs):
        scales[name] = write_heatmaps(out / "heatmaps", name, rep)
        curves += write_spectral_curves(out / "curves", name, pred, ref, wavelengths, args.seed)
    write_manifest(out, args, started,
                   {"metrics": "metrics.csv", "heatmaps": "heatmaps", "curves": curves},
                   config=json.loads(model.config.to_json()), extra={"heatmap_scales": scales})
    print((out / "metrics.csv").read_text(), end="")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    started = _now()
    model = load_checkpoint(args.ckpt)
    rgb = read_ppm(args.rgb)
    out = _out_dir(args.out)
    pred = np.clip(model.predict(rgb), 0.0, 1.0)
    cube_write(HsiCube(pred), out / "reconstruction.hsc")
    write_manifest(out, args, started, {"cube": "reconstruction.hsc"},
                   config=json.loads(model.config.to_json()))
    print(out / "reconstruction.hsc")
    return EXIT_OK


def cmd_verify(args) -> int:
    results = run_checks()
    failed = [r for r in results if not r.ok]
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name}: {r.detail.splitlines()[0] if r.detail else ''}")
    if failed:
        print(f"{len(failed)} check(s) failed: " + ", ".join(r.name for r in failed), file=sys.stderr)
        return EXIT_VERIFY
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def cmd_bench(args) -> int:
    started = _now()
    rows = benchmark(args.sizes, args.impl, args.runs, args.channels, args.state_size, args.seed)
    text = "\n".join([BENCH_HEADER] + [r.csv() for r in rows]) + "\n"
    print(text, end="")
    if args.out:
        out = _out_dir(args.out)
        (out / "bench.csv").write_text(text, encoding="utf-8")
        write_manifest(out, args, started, {"bench": "bench.csv"},
                       extra={"ratios_within_bounds": ratios_within(rows)})
    return EXIT_OK


def cmd_ablate(args) -> int:
    started = _now()
    try:
        toggles = parse_toggles(args.toggles)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.data:
        pairs = as_arrays(load_pairs(args.data))
    else:
        pairs = [(p.rgb, p.cube.array()) for p in synth_dataset(8, 16, 16, 8, args.seed)]
    train_pairs, held = split_pairs(pairs)
    eval_pairs = [(f"p{i}", rgb, cube) for i, (rgb, cube) in enumerate(held)]
    base = _load_config(args.config, feature_width=args.feature_width, state_size=args.state_size,
                        seed=args.seed, out_channels=pairs[0][1].shape[2], num_blocks=args.blocks)
    tcfg = TrainConfig(steps=args.steps, batch=args.batch, patch=args.patch, lr0=args.lr,
                       seed=args.seed)
    lines = run_ablation(base, tcfg, train_pairs, eval_pairs, toggles)
    out = _out_dir(args.out)
    (out / "ablation.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_manifest(out, args, started, {"ablation": "ablation.csv"},
                   config=json.loads(base.to_json()), extra={"train": vars(tcfg)})
    print("\n".join(lines))
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gmsr", description="Gradient-guided state-space spectral reconstruction")
    p.add_argument("-v", "--verbose", action="store_true")
    subs = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    s = subs.add_parser("synth", help="write a synthetic paired dataset")
    s.add_argument("--count", type=int, default=16)
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--bands", type=int, default=31)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    def model_flags(sp, blocks_default=None):
        sp.add_argument("--config", help="JSON file with model config fields")
        sp.add_argument("--feature-width", type=int)
        sp.add_argument("--blocks", type=int, default=blocks_default)
        sp.add_argument("--state-size", type=int)

    def train_flags(sp, steps, batch, patch, lr):
        sp.add_argument("--steps", type=int, default=steps)
        sp.add_argument("--batch", type=int, default=batch)
        sp.add_argument("--patch", type=int, default=patch)
        sp.add_argument("--lr", type=float, default=lr)
        sp.add_argument("--seed", type=int, default=0)

    t = subs.add_parser("train", help="train a model on a dataset manifest")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--log-every", type=int, default=0)
    model_flags(t)
    train_flags(t, 200, 4, 32, 1e-4)
    t.set_defaults(func=cmd_train)

    e = subs.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--config", help="expected model config; mismatches are rejected")
    e.add_argument("--baseline-data", help="manifest to fit the linear RGB->bands baseline on")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    r = subs.add_parser("reconstruct", help="reconstruct a cube from a PPM image")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--rgb", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_reconstruct)

    v = subs.add_parser("verify", help="run gradient checks and oracle suite")
    v.set_defaults(func=cmd_verify)

    b = subs.add_parser("bench", help="time the selective scan")
    b.add_argument("--sizes", type=int, nargs="+", default=list(DEFAULT_SIZES))
    b.add_argument("--impl", nargs="+", choices=("sequential", "parallel"),
                   default=["sequential", "parallel"])
    b.add_argument("--runs", type=int, default=20)
    b.add_argument("--channels", type=int, default=DEFAULT_CHANNELS)
    b.add_argument("--state-size", type=int, default=DEFAULT_STATE)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)

    a = subs.add_parser("ablate", help="branch-removal matrix and block-count sweep")
    a.add_argument("--toggles", default="all")
    a.add_argument("--data")
    a.add_argument("--out", required=True)
    model_flags(a, blocks_default=2)
    train_flags(a, 50, 2, 16, 1e-3)
    a.set_defaults(func=cmd_ablate, feature_width=8, state_size=4)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc.filename or ''}: {exc.strerror}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
