"""Experiment harness CLI.

Subcommands: train, eval, flops, probe-noise, grad-stats, separability,
pca-export. Every subcommand reads --config plus repeatable --set
key=value overrides. train creates a fresh run directory (never
overwrites) holding manifest.cfg, metrics.csv, and checkpoints; the other
subcommands either rebuild from --config or reuse a finished --run
directory. Exit codes: 0 success, 1 configuration error, 2 runtime
failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import __version__
from .checkpoint import load_model
from .config import (Config, ConfigError, RunManifest, build_dataset, build_model_from,
                     load_config, read_manifest, utc_now, write_manifest)
from .data import batches
from .inference import EnsembleSpec, count_macs, ensemble
from .probes import (export_features_pca, grad_stats, noise_probe, pca_csv, separability)
from .training import evaluate, train


class CliError(Exception):
    """Configuration/usage error: exits with code 1."""


def _parse_overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise CliError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _load_cfg(args) -> Config:
    try:
        return load_config(args.config, _parse_overrides(args.set))
    except ConfigError as exc:
        raise CliError("\n".join(exc.errors)) from exc


def _load_run(run_dir: str, overrides: dict[str, str]):
    manifest_path = os.path.join(run_dir, "manifest.cfg")
    ckpt_path = os.path.join(run_dir, "checkpoint_final.sdck")
    for p in (manifest_path, ckpt_path):
        if not os.path.exists(p):
            raise CliError(f"not a finished run directory (missing {os.path.basename(p)}): {run_dir}")
    try:
        _, meta = read_manifest(manifest_path)
        cfg = load_config(manifest_path, overrides)
    except ConfigError as exc:
        raise CliError("\n".join(exc.errors)) from exc
    dataset = build_dataset(cfg)
    if meta.get("run.dataset_checksum") and meta["run.dataset_checksum"] != dataset.checksum():
        raise RuntimeError(f"dataset checksum changed since the run was recorded ({run_dir})")
    model = build_model_from(cfg)
    load_model(model, ckpt_path)
    model.eval()
    return cfg, dataset, model


def _write_or_print(text: str, out_path: str | None) -> None:
    if out_path:
        os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
        with open(out_path, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        print(f"wrote {out_path}")
    else:
        sys.stdout.write(text)


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    out_dir = args.out
    if os.path.exists(out_dir):
        raise CliError(f"run directory already exists: {out_dir}")
    os.makedirs(out_dir)
    dataset = build_dataset(cfg)
    model = build_model_from(cfg)
    manifest = RunManifest(cfg, __version__, dataset.checksum(), utc_now())
    manifest_path = os.path.join(out_dir, "manifest.cfg")
    write_manifest(manifest_path, manifest)
    log = print if not args.quiet else None
    model, records = train(model, dataset, cfg.plan, out_dir=out_dir, log=log)
    manifest.finished_at = utc_now()
    write_manifest(manifest_path, manifest)
    final = records[-1]
    accs = " ".join(f"exit{i + 1}={a:.2f}" for i, a in enumerate(final.test_acc))
    print(f"done: {accs} ensemble={final.ensemble_acc:.2f}")
    return 0


def cmd_eval(args) -> int:
    cfg, dataset, model = _load_run(args.run, _parse_overrides(args.set))
    if args.exit is not None:
        if args.exit not in model.exit_indices:
            raise CliError(f"--exit {args.exit} not in model (has {model.exit_indices})")
        accs, _ = evaluate(model, dataset.test)
        acc = accs[model.exit_indices.index(args.exit)]
        text = f"exit,accuracy\n{args.exit},{acc:.6f}\n"
    else:
        weights = None
        if args.ensemble:
            weights = [float(w) for w in args.ensemble.split(",")]
        spec = EnsembleSpec(weights=weights,
                            included_exits=list(model.exit_indices) if weights else None)
        correct = 0
        for xb, yb in batches(dataset.test, 256):
            ids, _ = ensemble(model, xb, spec)
            correct += int((ids == yb).sum())
        acc = 100.0 * correct / len(dataset.test)
        text = f"ensemble,accuracy\n{args.ensemble or 'uniform'},{acc:.6f}\n"
    _write_or_print(text, args.out)
    return 0


def cmd_flops(args) -> int:
    if args.run:
        _, _, model = _load_run(args.run, _parse_overrides(args.set))
    else:
        if not args.config:
            raise CliError("flops needs --config or --run")
        model = build_model_from(_load_cfg(args))
    _write_or_print(count_macs(model).to_csv(), args.out)
    return 0


def cmd_probe_noise(args) -> int:
    cfg, dataset, model = _load_run(args.run, _parse_overrides(args.set))
    result = noise_probe(model, dataset.train, sigmas=cfg.probe_sigmas,
                         trials=cfg.probe_trials, seed=cfg.probe_seed)
    _write_or_print(result.to_csv(), args.out)
    return 0


def cmd_grad_stats(args) -> int:
    cfg, dataset, model = _load_run(args.run, _parse_overrides(args.set))
    xb, yb = next(batches(dataset.train, cfg.plan.batch_size))
    stats = grad_stats(model, xb, yb, regime=cfg.plan.regime,
                       distill=cfg.plan.effective_distill())
    _write_or_print(stats.to_csv(), args.out)
    return 0


def cmd_separability(args) -> int:
    cfg, dataset, model = _load_run(args.run, _parse_overrides(args.set))
    report = separability(model, dataset.test)
    _write_or_print(report.to_csv(), args.out)
    return 0


def cmd_pca_export(args) -> int:
    cfg, dataset, model = _load_run(args.run, _parse_overrides(args.set))
    exit_index = cfg.pca_exit or model.exit_indices[-1]
    rows, _ = export_features_pca(model, dataset.test, exit_index,
                                  components=cfg.pca_components, seed=cfg.probe_seed)
    _write_or_print(pca_csv(rows), args.out)
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="selfdistill",
                                     description="Multi-exit self-distillation experiment harness")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True, needs_out=False, run_based=False):
        if run_based:
            p.add_argument("--run", required=True, help="finished run directory")
        else:
            p.add_argument("--config", required=config_required, help="config file path")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--out", required=needs_out,
                       help="output path" + ("" if needs_out else " (default: stdout)"))

    p = sub.add_parser("train", help="train a model into a fresh run directory")
    common(p, needs_out=True)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a finished run on its test split")
    common(p, run_based=True)
    p.add_argument("--exit", type=int, help="evaluate a single exit")
    p.add_argument("--ensemble", help="comma-separated ensemble weights")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("flops", help="per-exit MAC/parameter cost report")
    p.add_argument("--config", help="config file path")
    p.add_argument("--run", help="finished run directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_flops)

    p = sub.add_parser("probe-noise", help="parameter-noise robustness probe")
    common(p, run_based=True)
    p.set_defaults(fn=cmd_probe_noise)

    p = sub.add_parser("grad-stats", help="per-layer gradient magnitudes on one batch")
    common(p, run_based=True)
    p.set_defaults(fn=cmd_grad_stats)

    p = sub.add_parser("separability", help="per-exit SSE/SSB feature separability")
    common(p, run_based=True)
    p.set_defaults(fn=cmd_separability)

    p = sub.add_parser("pca-export", help="principal-component projection of exit features")
    common(p, run_based=True)
    p.set_defaults(fn=cmd_pca_export)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print("error: " + "; ".join(exc.errors), file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - boundary: report and signal runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
