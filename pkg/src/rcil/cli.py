"""Command-line front end: run, ablate, verify, report."""

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig
from .trainer import run_experiment


def _parse_override(pair):
    if "=" not in pair:
        raise argparse.ArgumentTypeError(f"override must be key=value, got {pair!r}")
    key, _, value = pair.partition("=")
    return key.strip(), value.strip()


def _add_common(parser):
    parser.add_argument("--config", type=Path, default=None,
                        help="configuration file (defaults used when omitted)")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--outdir", type=Path, default=None,
                        help="output root (default: $RCIL_OUTDIR or the config value)")
    parser.add_argument("--override", action="append", type=_parse_override, default=[],
                        metavar="KEY=VALUE", help="set a configuration key")


def _load_config(args):
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    if args.override:
        cfg.apply_overrides(dict(args.override))
    if args.seed is not None:
        cfg.set("seed", args.seed)
    return cfg


def _resolve_outdir(args, cfg):
    if args.outdir is not None:
        return Path(args.outdir)
    env = os.environ.get("RCIL_OUTDIR")
    if env:
        return Path(env)
    return Path(cfg.get("outdir"))


def _emit_plots(run_dir):
    """Render IoU-vs-step curves from curves.csv; a pure view of the CSV."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    curves_path = Path(run_dir) / "curves.csv"
    if not curves_path.exists():
        return None
    steps, old, new, allv = [], [], [], []
    for line in curves_path.read_text().splitlines()[1:]:
        _, t, o, n, a = line.split(",")
        steps.append(int(t))
        old.append(float(o))
        new.append(float(n))
        allv.append(float(a))
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(steps, old, marker="o", label="old")
    ax.plot(steps, new, marker="s", label="new")
    ax.plot(steps, allv, marker="^", label="all")
    ax.set_xlabel("step")
    ax.set_ylabel("mIoU")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    plots_dir = Path(run_dir) / "plots"
    plots_dir.mkdir(exist_ok=True)
    out = plots_dir / "miou_steps.png"
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def cmd_run(args):
    cfg = _load_config(args)
    outdir = _resolve_outdir(args, cfg)
    run_dir = outdir / cfg.run_id()
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.write(run_dir / "config.resolved")
    rows, _ = run_experiment(cfg, run_dir, resume=args.resume,
                             cache_root=outdir, log=print)
    _emit_plots(run_dir)
    print(f"results: {run_dir / 'results.csv'}")
    return 0


AXES = ("pooling_variant", "rc_ops", "class_order", "kd_layers", "kernels", "hparams")


def _axis_rows(axis, cfg):
    """Override sets mirroring the published ablation tables' row structure."""
    if axis == "pooling_variant":
        return [(v, {"distill.variant": v, "method.pcd": "true"})
                for v in ("none", "gap", "max", "strip", "avg_cube")]
    if axis == "rc_ops":
        base = {"method.name": "rc_only", "method.drop_path": "false",
                "method.merge": "false", "method.freeze": "false"}
        rows = [
            ("parallel", {}),
            ("merge", {"method.merge": "true"}),
            ("merge_frozen", {"method.merge": "true", "method.freeze": "true"}),
            ("merge_frozen_droppath", {"method.merge": "true", "method.freeze": "true",
                                       "method.drop_path": "true"}),
        ]
        return [(name, {**base, **extra}) for name, extra in rows]
    if axis == "class_order":
        return [(name, {"schedule.class_order": spec})
                for name, spec in [("A", "ascending"), ("B", "random:1"),
                                   ("C", "random:2"), ("D", "random:3"), ("E", "random:4")]]
    if axis == "kd_layers":
        n_stages = len(cfg.get("model.stage_blocks"))
        n_taps = n_stages + 1
        rows = []
        for i in range(n_taps):
            mask = ["0"] * n_taps
            mask[i] = "1"
            name = "decoder" if i == n_taps - 1 else f"layer{i + 1}"
            rows.append((name, {"distill.layer_mask": ",".join(mask)}))
        for start in range(n_taps - 2, -1, -1):
            mask = ["0"] * start + ["1"] * (n_taps - start)
            name = f"last{n_taps - start}"
            rows.append((name, {"distill.layer_mask": ",".join(mask)}))
        return [(name, {**extra, "method.pcd": "true"}) for name, extra in rows]
    if axis == "kernels":
        full = cfg.get("distill.spatial_kernels")
        rows = [(f"k{k}", {"distill.spatial_kernels": str(k)}) for k in full]
        rows += [(f"upto{full[i]}", {"distill.spatial_kernels": ",".join(map(str, full[: i + 1]))})
                 for i in range(1, len(full))]
        return [(name, {**extra, "method.pcd": "true"}) for name, extra in rows]
    if axis == "hparams":
        rows = []
        for lam in (1.0, 10.0, 100.0):
            for gamma in (0.001, 0.01, 0.1):
                rows.append((f"lam{lam:g}_gamma{gamma:g}",
                             {"loss.lambda": str(lam), "loss.gamma": str(gamma)}))
        return rows
    raise ValueError(f"unknown axis {axis!r}; valid axes: {', '.join(AXES)}")


def cmd_ablate(args):
    base = _load_config(args)
    outdir = _resolve_outdir(args, base)
    try:
        rows = _axis_rows(args.axis, base)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    sweep_dir = outdir / f"ablate-{args.axis}-{base.run_id()}"
    sweep_dir.mkdir(parents=True, exist_ok=True)
    table = []
    for name, overrides in rows:
        cfg = ExperimentConfig.from_text(base.to_text())
        cfg.apply_overrides(overrides)
        run_dir = sweep_dir / name
        run_dir.mkdir(parents=True, exist_ok=True)
        cfg.write(run_dir / "config.resolved")
        print(f"[{args.axis}] {name}")
        results, reports = run_experiment(cfg, run_dir, cache_root=outdir)
        final = reports[-1] if reports else None
        table.append((name, final.miou_old, final.miou_new, final.miou_all))
    lines = ["format,row,miou_old,miou_new,miou_all"]
    lines += [f"1,{n},{o:.6f},{nw:.6f},{a:.6f}" for n, o, nw, a in table]
    if args.axis == "class_order":
        alls = np.array([r[3] for r in table])
        lines.append(f"1,mean_std,{alls.mean():.6f},{alls.std():.6f},nan")
    (sweep_dir / "ablation.csv").write_text("\n".join(lines) + "\n")
    print(f"\n{'row':<24}{'old':>8}{'new':>8}{'all':>8}")
    for n, o, nw, a in table:
        print(f"{n:<24}{o:>8.3f}{nw:>8.3f}{a:>8.3f}")
    print(f"table: {sweep_dir / 'ablation.csv'}")
    return 0


def cmd_verify(args):
    from . import verify

    results = verify.run_all(quick=args.quick)
    width = max(len(name) for name, _, _ in results)
    failed = 0
    for name, ok, detail in results:
        status = "PASS" if ok else "FAIL"
        print(f"{name:<{width}}  {status}  {detail}")
        failed += not ok
    print(f"\n{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_report(args):
    run_dir = Path(args.run_dir)
    results = run_dir / "results.csv"
    if not results.exists():
        print(f"error: {results} not found", file=sys.stderr)
        return 2
    print(results.read_text().rstrip())
    out = _emit_plots(run_dir)
    if out:
        print(f"plot: {out}")
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="rcil",
        description="Continual semantic segmentation lab: representation-"
                    "compensated blocks with pooled cube distillation")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one experiment")
    _add_common(p_run)
    p_run.add_argument("--resume", action="store_true",
                       help="continue from the last step checkpoint in the run dir")
    p_run.set_defaults(func=cmd_run)

    p_ablate = sub.add_parser("ablate", help="sweep one ablation axis")
    _add_common(p_ablate)
    p_ablate.add_argument("--axis", required=True, choices=AXES)
    p_ablate.set_defaults(func=cmd_ablate)

    p_verify = sub.add_parser("verify", help="run the invariant suite")
    p_verify.add_argument("--quick", action="store_true", help="fewer random cases")
    p_verify.set_defaults(func=cmd_verify)

    p_report = sub.add_parser("report", help="re-render tables and plots from CSVs")
    p_report.add_argument("--run-dir", required=True)
    p_report.set_defaults(func=cmd_report)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
