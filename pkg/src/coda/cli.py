"""Command-line entry points for reproducible runs and ablations.

Every run lands in a directory named by the config hash plus a timestamp and
carries a config snapshot, the stage trace, the metric history (JSON lines),
a checkpoint, and rendered figures next to the delimited outputs. Failures
exit nonzero with a single machine-parsable error line on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

from . import config as config_mod
from . import engine, metrics, report, scenegen, severity
from .config import RunConfig, config_hash
from .savpt import INITS, PLACEMENTS


class CliError(RuntimeError):
    pass


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _load_config(path) -> RunConfig:
    if not Path(path).exists():
        raise CliError(f"config file not found: {path}")
    return config_mod.load(path)


def _run_dir(cfg: RunConfig, override, kind: str) -> Path:
    if override:
        root = Path(override)
        root.mkdir(parents=True, exist_ok=True)
        return root
    base = Path(os.environ.get("CODA_RUN_DIR", cfg.run_root))
    stamp = time.strftime("%Y%m%dT%H%M%S")
    candidate = base / f"{config_hash(cfg)}-{stamp}-{kind}"
    n = 0
    while candidate.exists():
        n += 1
        candidate = base / f"{config_hash(cfg)}-{stamp}-{kind}-{n}"
    candidate.mkdir(parents=True)
    return candidate


def _manifest_paths(cfg: RunConfig, data_override) -> tuple[Path, Path]:
    root = Path(data_override or cfg.data_dir)
    train = root / "manifest.jsonl"
    evalm = root / "eval_manifest.jsonl"
    if not train.exists():
        raise CliError(f"training manifest not found: {train} (run `coda gen-data` first)")
    if not evalm.exists():
        raise CliError(f"evaluation manifest not found: {evalm} (run `coda gen-data` first)")
    return train, evalm


# ----------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config)
    out = Path(args.out or cfg.data_dir)
    train_manifest, eval_manifest = scenegen.build_dataset(cfg.data, out)
    _emit(
        {
            "manifest": str(train_manifest),
            "eval_manifest": str(eval_manifest),
            "train_samples": sum(1 for _ in open(train_manifest)),
            "eval_samples": sum(1 for _ in open(eval_manifest)),
        }
    )
    return 0


def train_run(cfg: RunConfig, run_dir: Path, data_override=None) -> dict:
    """Train per config, writing config snapshot, traces, metrics, checkpoint."""
    train_manifest, _ = _manifest_paths(cfg, data_override)
    samples = scenegen.load_manifest(train_manifest)
    config_mod.save(cfg, run_dir / "config.json")
    state = engine.init_train_state(cfg)

    history: list[dict] = []
    with open(run_dir / "trace.jsonl", "w") as trace_fh, open(
        run_dir / "metrics.jsonl", "w"
    ) as metrics_fh:

        def on_step(t, m):
            trace_fh.write(
                json.dumps(
                    {"t": t, "stage": m["stage"], "batch_ids": m["batch_ids"],
                     "source_ids": m["source_ids"]},
                    sort_keys=True,
                )
                + "\n"
            )
            if (t + 1) % cfg.log_every == 0 or t + 1 == cfg.total_iters:
                entry = {
                    "t": t + 1,
                    "loss_s": m["loss_s"],
                    "loss_t": m["loss_t"],
                    "loss_fd": m["loss_fd"],
                    "loss_total": m["loss_total"],
                    "loss_s_smooth": engine.smoothed_loss(state),
                    "q_mean": m["q_mean"],
                    "stage": m["stage"],
                }
                history.append(entry)
                metrics_fh.write(json.dumps(entry, sort_keys=True) + "\n")

        engine.train_loop(state, samples, cfg.total_iters, on_step=on_step)

    ckpt = run_dir / "checkpoint.coda"
    engine.save_checkpoint(state, ckpt)
    figures = run_dir / "figures"
    figures.mkdir(exist_ok=True)
    if history:
        report.save_loss_figure(history, figures / "losses.png")
    return {
        "run_dir": str(run_dir),
        "config_hash": config_hash(cfg),
        "checkpoint": str(ckpt),
        "iterations": cfg.total_iters,
        "final_loss_s_smooth": engine.smoothed_loss(state),
    }


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    run_dir = _run_dir(cfg, args.run_dir, "train")
    _emit(train_run(cfg, run_dir, args.data))
    return 0


def _write_eval_outputs(rep: dict, out_base: Path) -> None:
    out_base.parent.mkdir(parents=True, exist_ok=True)
    with open(out_base.with_suffix(".json"), "w") as fh:
        json.dump(rep, fh, indent=2, sort_keys=True)
    rows = report.eval_report_rows(rep)
    fields = ["scene", "miou", "pixels"] + [f"iou_class{i}" for i in range(5)]
    report.write_csv(rows, fields, out_base.with_suffix(".csv"))
    report.save_eval_figure(rep, out_base.with_suffix(".png"))


def cmd_eval(args) -> int:
    ckpt = Path(args.ckpt)
    if not ckpt.exists():
        raise CliError(f"checkpoint not found: {ckpt}")
    if args.config:
        cfg = _load_config(args.config)
        state = engine.load_checkpoint(ckpt)
        if config_hash(cfg) != config_hash(state.config):
            raise CliError(
                f"config hash mismatch: config {config_hash(cfg)} vs "
                f"checkpoint {config_hash(state.config)}"
            )
    manifest = Path(args.manifest)
    if not manifest.exists():
        raise CliError(f"manifest not found: {manifest}")
    toggles = [True, False] if args.both else [not args.no_savpt]
    out_base = Path(args.out) if args.out else ckpt.parent / "eval_report"
    results = {}
    for enabled in toggles:
        rep = metrics.evaluate_checkpoint(ckpt, manifest, savpt_enabled=enabled)
        suffix = "savpt_on" if enabled else "savpt_off"
        _write_eval_outputs(rep, out_base.parent / f"{out_base.name}_{suffix}")
        results[suffix] = rep["overall"]["miou"]
    _emit(results)
    return 0


def cmd_severity_scan(args) -> int:
    manifest = Path(args.manifest)
    if not manifest.exists():
        raise CliError(f"manifest not found: {manifest}")
    cfg = severity.SeverityConfig(sigma=args.sigma, tau=args.tau)
    hist = severity.severity_histogram(manifest, cfg, dump_dir=args.dump_dir)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(hist, indent=2, sort_keys=True) + "\n")
        rows = [
            {"scene": s, "high": v["high"], "low": v["low"]}
            for s, v in hist["scenes"].items()
        ]
        report.write_csv(rows, ["scene", "high", "low"], out.with_suffix(".csv"))
        report.save_severity_figure(hist, out.with_suffix(".png"))
    _emit(hist)
    return 0


_SWEEPS = {
    "tau": ("tau", lambda v: float(v), "0.05,0.38"),
    "placement": ("placement", str, ",".join(PLACEMENTS)),
    "init": ("prompt_init", str, ",".join(INITS)),
    "cod-iters": ("chain_end", lambda v: int(v), "520,600,780"),
}


def cmd_ablate(args) -> int:
    field, parse, default = _SWEEPS[args.axis]
    values = [parse(v) for v in (args.values or default).split(",")]
    cfg = _load_config(args.config)
    train_manifest, eval_manifest = _manifest_paths(cfg, args.data)
    train_samples = scenegen.load_manifest(train_manifest)
    eval_samples = scenegen.load_manifest(eval_manifest)
    run_dir = _run_dir(cfg, args.run_dir, f"ablate-{args.axis}")
    config_mod.save(cfg, run_dir / "config.json")
    variants = [dataclasses.replace(cfg, **{field: v}) for v in values]
    jobs = [(variant, train_samples, eval_samples) for variant in variants]
    if args.parallel > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            reports = list(pool.map(metrics.sweep_variant, jobs))
    else:
        reports = [metrics.sweep_variant(job) for job in jobs]
    rows = []
    for value, variant, rep in zip(values, variants, reports):
        rep["swept"] = {field: value}
        rep["config_hash"] = config_hash(cfg)
        rep["variant_hash"] = config_hash(variant)
        out = run_dir / f"report_{field}_{value}.json"
        out.write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
        rows.append({field: value, "miou": rep["overall"]["miou"], "report": str(out)})
    report.write_csv(rows, [field, "miou", "report"], run_dir / "summary.csv")
    report.save_sweep_figure(rows, field, f"{args.axis} sweep", run_dir / "summary.png")
    _emit({"run_dir": str(run_dir), "axis": args.axis, "rows": rows})
    return 0


def cmd_range_study(args) -> int:
    cfg = _load_config(args.config)
    seeds = [int(s) for s in args.seeds.split(",")]
    strategies = args.strategies.split(",")
    train_manifest, eval_manifest = _manifest_paths(cfg, args.data)
    train_samples = scenegen.load_manifest(train_manifest)
    eval_samples = scenegen.load_manifest(eval_manifest)
    run_dir = _run_dir(cfg, args.run_dir, "range")
    config_mod.save(cfg, run_dir / "config.json")
    rep = metrics.seed_range_study(
        cfg, strategies, seeds, train_samples, eval_samples, workers=args.parallel
    )
    (run_dir / "range_study.json").write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
    report.write_csv(
        report.range_report_rows(rep),
        ["strategy", "seed", "miou", "error"],
        run_dir / "range_study.csv",
    )
    report.save_range_figure(rep, run_dir / "range_study.png")
    _emit(
        {
            "run_dir": str(run_dir),
            "strategies": {
                k: {"average": v["average"], "range": v["range"], "failed": v["failed"]}
                for k, v in rep["strategies"].items()
            },
        }
    )
    return 0


def cmd_verify(args) -> int:
    run_dir = Path(args.run_dir)
    cfg_path = run_dir / "config.json"
    if not cfg_path.exists():
        raise CliError(f"no config snapshot in {run_dir}")
    cfg = config_mod.load(cfg_path)
    expect = config_hash(cfg)
    checked = {"config_hash": expect, "checkpoints": 0, "reports": 0}
    if not run_dir.name.startswith(expect):
        raise CliError(f"run dir {run_dir.name} does not carry config hash {expect}")
    for ckpt in run_dir.glob("*.coda"):
        state = engine.load_checkpoint(ckpt)
        if config_hash(state.config) != expect:
            raise CliError(
                f"checkpoint {ckpt.name} hash {config_hash(state.config)} != {expect}"
            )
        checked["checkpoints"] += 1
    for rep_path in run_dir.rglob("*.json"):
        if rep_path.name == "config.json":
            continue
        data = json.loads(rep_path.read_text())
        if isinstance(data, dict) and "config_hash" in data:
            if data["config_hash"] != expect:
                raise CliError(
                    f"report {rep_path.name} hash {data['config_hash']} != {expect}"
                )
            checked["reports"] += 1
    checked["ok"] = True
    _emit(checked)
    return 0


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="coda",
        description="curriculum self-training for segmentation under adverse scenes",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic benchmark")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="dataset directory (default: config data_dir)")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="run one training schedule")
    p.add_argument("--config", required=True)
    p.add_argument("--run-dir", help="explicit run directory")
    p.add_argument("--data", help="dataset directory override")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a labeled manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--no-savpt", action="store_true", help="bypass prompts and adapters")
    p.add_argument("--both", action="store_true", help="report both toggles")
    p.add_argument("--out", help="report base path (default: next to checkpoint)")
    p.add_argument("--config", help="cross-check config hash against the checkpoint")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("severity-scan", help="per-scene severity histogram of a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--sigma", type=float, default=0.5)
    p.add_argument("--tau", type=float, default=0.38)
    p.add_argument("--out", help="also write JSON/CSV/PNG to this base path")
    p.add_argument("--dump-dir", help="write per-sample severe-pixel debug PPMs here")
    p.set_defaults(fn=cmd_severity_scan)

    p = sub.add_parser("ablate", help="sweep one axis, one full run per value")
    p.add_argument("axis", choices=sorted(_SWEEPS))
    p.add_argument("--config", required=True)
    p.add_argument("--values", help="comma-separated sweep values")
    p.add_argument("--parallel", type=int, default=1, help="fan runs out over processes")
    p.add_argument("--run-dir")
    p.add_argument("--data")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("range-study", help="final mIoU spread across seeds per strategy")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", default="1,2,38")
    p.add_argument("--strategies", default="tradition,cod_tra")
    p.add_argument("--parallel", type=int, default=1, help="fan runs out over processes")
    p.add_argument("--run-dir")
    p.add_argument("--data")
    p.set_defaults(fn=cmd_range_study)

    p = sub.add_parser("verify", help="check the report -> checkpoint -> config chain")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(fn=cmd_verify)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as e:  # noqa: BLE001 - single-line machine-parsable errors
        sys.stderr.write(
            json.dumps({"error": type(e).__name__, "message": str(e)}, sort_keys=True) + "\n"
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
