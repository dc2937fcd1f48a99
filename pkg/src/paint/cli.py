"""Command-line entry point (installed as ``paintctl``).

Verbs cover the full pipeline: generate demonstrator data, train the
safety policy, produce or ingest sketch labels, train the reward model,
tune with a chosen preference strength, evaluate bundles, run the
experiment suite, and serve the sketching UI's HTTP API. Failures exit
non-zero with a machine-readable JSON error record on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np


def _data_dir(args) -> Path:
    return Path(args.data_dir or os.environ.get("PAINT_DATA", "./paint-data"))


def _workspace(args):
    from .experiments import Scale, Workspace

    scale = Scale.paper() if getattr(args, "paper_scale", False) else Scale()
    return Workspace(_data_dir(args), scale=scale)


def cmd_gen_data(args):
    from . import config as cfgmod
    from .datastore import file_sha256, write_trajectory
    from .experiments import demonstrator, make_fault_injector
    from .simulator import run_episode

    params = cfgmod.load_patient(args.patient)
    schedule = cfgmod.meal_schedule(args.patient)
    injector = make_fault_injector(args.fault)
    out_dir = _data_dir(args) / "datasets" / (
        args.patient if args.fault == "none" else f"{args.patient}-{args.fault}"
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    n_episodes = max(1, args.days // 10)
    for ep in range(n_episodes):
        seed = args.seed + ep
        traj = run_episode(
            params,
            demonstrator(params),
            schedule=schedule,
            fault_injector=injector,
            days=min(10, args.days),
            seed=seed,
            episode_id=f"{args.patient}-{args.fault}-{ep:03d}",
        )
        path = out_dir / f"ep{ep:03d}.traj"
        write_trajectory(path, traj)
        print(f"{path} sha256={file_sha256(path)[:12]} samples={len(traj)}")
    return 0


def cmd_train_priori(args):
    ws = _workspace(args)
    bundle = ws.priori(args.patient, args.seed, fault=args.fault)
    print(f"priori bundle: {ws.priori_dir(args.patient, args.seed, args.fault)}")
    print(json.dumps(bundle.meta.get("diagnostics", {}), sort_keys=True))
    return 0


def cmd_auto_label(args):
    from .reward_learning import write_labels

    ws = _workspace(args)
    labels = ws.labels(
        args.patient,
        args.preference,
        args.seed,
        fault=args.fault,
        n_labels=args.samples,
        corrupt_fraction=args.corrupt_fraction,
        noise_sigma_multiple=args.noise_sigma,
    )
    if args.out:
        write_labels(args.out, labels)
        print(args.out)
    print(f"{len(labels)} labels")
    return 0


def cmd_train_reward(args):
    from .nn import save_checkpoint
    from .reward_learning import read_labels, train_reward_model

    ws = _workspace(args)
    if args.labels:
        labels = read_labels(args.labels)
        ds = ws.dataset(args.patient, args.fault)
        priori = ws.priori(args.patient, args.seed, args.fault)
        model = train_reward_model(ds, labels, ws.reward_cfg, seed=args.seed, norm=priori.norm)
        out = Path(args.out or (_data_dir(args) / "rewards" / "custom.ckpt"))
        out.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out, model.mlp, model.norm, {"val_loss": model.meta["val_loss"]})
        print(f"{out} val_loss={model.meta['val_loss']:.5f}")
    else:
        model = ws.reward_model(
            args.patient, args.preference, args.seed, fault=args.fault,
            n_labels=args.samples,
        )
        print(f"val_loss={model.meta.get('val_loss', float('nan')):.5f}")
    return 0


def cmd_tune(args):
    ws = _workspace(args)
    bundle = ws.tuned(
        args.patient,
        args.preference,
        args.seed,
        lam=args.lam,
        fault=args.fault,
        n_labels=args.samples,
    )
    print(f"tuned bundle for {args.patient} preference={args.preference} lambda={bundle.lam}")
    return 0


def cmd_eval(args):
    from .experiments import PairedReports
    from .safe_orl import PolicyBundle

    ws = _workspace(args)
    bundle = PolicyBundle.load(args.bundle)
    seeds = tuple(args.seed + r for r in range(args.repeats))
    ws.scale = ws.scale.__class__(
        episodes_per_patient=ws.scale.episodes_per_patient,
        n_labels=ws.scale.n_labels,
        seeds=ws.scale.seeds,
        eval_repeats=args.repeats,
        eval_days=args.days,
        lambda_default=ws.scale.lambda_default,
    )
    rep = ws.evaluate(bundle, fault=args.fault, include_pid=args.include_pid, eval_seeds=seeds)
    rows = []
    for name, reports in (("tuned", rep.tuned), ("priori", rep.priori), ("pid", rep.pid)):
        if reports is None:
            continue
        rows.append(
            {
                "policy": name,
                "mean_glucose": PairedReports.median(reports, "mean_glucose"),
                "reward": PairedReports.median(reports, "magni_total"),
                "tir_pct": PairedReports.median(reports, "tir_pct"),
                "tbr_pct": PairedReports.median(reports, "tbr_pct"),
                "cov_pct": PairedReports.median(reports, "cov_pct"),
            }
        )
    from .experiments import format_table

    print(format_table(rows), end="")
    if args.out:
        with open(args.out, "w") as f:
            for row in rows:
                f.write(json.dumps(row, sort_keys=True) + "\n")
    return 0


def cmd_experiment(args):
    from .experiments import EXPERIMENTS, format_table

    ws = _workspace(args)
    fn = EXPERIMENTS[args.name]
    kwargs = {}
    if args.name in ("common-goals",) and args.patients:
        kwargs["patients"] = tuple(args.patients)
    if args.name in ("mealtimes", "compression") and args.patients:
        kwargs["patients"] = tuple(args.patients)
    rows = fn(ws, **kwargs)
    print(format_table(rows), end="")
    return 0


def cmd_serve(args):
    import uvicorn

    from .service import create_app

    app = create_app(_data_dir(args), patient_id=args.patient)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="paintctl",
        description="Preference-adaptable insulin dosing pipeline",
    )
    parser.add_argument("--data-dir", default=None, help="artifact directory (or $PAINT_DATA)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate demonstrator trajectories")
    p.add_argument("--patient", required=True)
    p.add_argument("--days", type=int, default=40)
    p.add_argument("--seed", type=int, default=1000)
    p.add_argument("--fault", default="none", choices=["none", "compression_low"])
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-priori", help="phase-1 safety policy")
    p.add_argument("--patient", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fault", default="none", choices=["none", "compression_low"])
    p.add_argument("--paper-scale", action="store_true")
    p.set_defaults(fn=cmd_train_priori)

    p = sub.add_parser("auto-label", help="simulate sketch labels")
    p.add_argument("--patient", required=True)
    p.add_argument("--preference", required=True)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fault", default="none", choices=["none", "compression_low"])
    p.add_argument("--corrupt-fraction", type=float, default=0.0)
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--out", default=None)
    p.add_argument("--paper-scale", action="store_true")
    p.set_defaults(fn=cmd_auto_label)

    p = sub.add_parser("train-reward", help="fit the reward model")
    p.add_argument("--patient", required=True)
    p.add_argument("--preference", default=None)
    p.add_argument("--labels", default=None, help="label JSONL path (overrides --preference)")
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fault", default="none", choices=["none", "compression_low"])
    p.add_argument("--out", default=None)
    p.add_argument("--paper-scale", action="store_true")
    p.set_defaults(fn=cmd_train_reward)

    p = sub.add_parser("tune", help="phase-2 preference tuning")
    p.add_argument("--patient", required=True)
    p.add_argument("--preference", required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=2.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--fault", default="none", choices=["none", "compression_low"])
    p.add_argument("--paper-scale", action="store_true")
    p.set_defaults(fn=cmd_tune)

    p = sub.add_parser("eval", help="paired evaluation of a bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--days", type=int, default=10)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=9000)
    p.add_argument("--fault", default="none", choices=["none", "compression_low"])
    p.add_argument("--include-pid", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("experiment", help="run a protocol from the suite")
    p.add_argument(
        "name",
        choices=[
            "bg-targets", "common-goals", "mealtimes", "compression",
            "sample-efficiency", "corrupt-labels", "label-noise",
            "diverse-strategies",
        ],
    )
    p.add_argument("--patients", nargs="*", default=None)
    p.add_argument("--paper-scale", action="store_true")
    p.set_defaults(fn=cmd_experiment)

    p = sub.add_parser("serve", help="HTTP service for the sketchpad UI")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--patient", default="adult")
    p.set_defaults(fn=cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        record = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(record), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
