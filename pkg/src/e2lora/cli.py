"""Experiment runner and verification front-end.

    e2lora run CONFIG [--seed S[,S...]] [--out DIR] [--jobs N]
    e2lora verify SUITE [--out FILE] [--inject-bug]
    e2lora spectra RUN_DIR

Configs are JSON with nested sections (stream, model, train, alloc, align)
plus strategy, out_dir and checkpoint; unknown keys are hard errors so a
misspelled threshold cannot silently fall back to a default. Every run
directory receives the fully resolved config, so a run is reproducible
from its artifacts alone. All CSV numbers carry 17 significant digits and
identical config+seed gives byte-identical outputs.

Exit codes: 0 success, 2 config/usage error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .errors import DivergenceError, SchemaError, ValidationError

_SCHEMA = {
    "stream": {
        "num_tasks": (int, 2),
        "classes_per_task": (int, 2),
        "feature_dim": (int, 16),
        "separation": (float, 8.0),
        "mode": (str, "class-incremental"),
        "seed": (int, 0),
        "samples_per_class": (int, 100),
    },
    "model": {
        "hidden_dim": (int, 64),
        "out_dim": (int, 64),
    },
    "strategy": (str, "e2lora"),
    "train": {
        "lr_lora": (float, 0.0005),
        "lr_classifier": (float, 0.01),
        "epochs": (int, 5),
        "batch_size": (int, 64),
        "distill_weight": (float, 0.2),
        "temperature": (float, 2.0),
        "seed": (int, 0),
        "proxy_count": (int, 16),
    },
    "alloc": {
        "rho": (float, 0.9999),
        "first_task_rank_cap": ((int, type(None)), None),
    },
    "align": {
        "samples_per_class": (int, 256),
        "epochs": (int, 3),
        "lr": (float, 0.01),
        "seed": (int, 0),
    },
    "out_dir": (str, "run_out"),
    "checkpoint": (bool, False),
}


def _fmt(x):
    return f"{x:.17g}"


def _check_type(path, value, expected):
    kinds = expected if isinstance(expected, tuple) else (expected,)
    if float in kinds and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if int in kinds and isinstance(value, bool):
        raise SchemaError(path, f"expected int, got bool {value!r}")
    if not isinstance(value, kinds):
        names = "/".join(k.__name__ for k in kinds)
        raise SchemaError(path, f"expected {names}, got {type(value).__name__}")
    return value


def resolve_config(raw):
    """Fill defaults and reject unknown or mistyped fields."""
    if not isinstance(raw, dict):
        raise SchemaError("<root>", "config must be a JSON object")
    resolved = {}
    for key, spec in _SCHEMA.items():
        if isinstance(spec, dict):
            section = raw.get(key, {})
            if not isinstance(section, dict):
                raise SchemaError(key, "expected an object")
            for sub in section:
                if sub not in spec:
                    raise SchemaError(f"{key}.{sub}", "unknown field")
            resolved[key] = {
                sub: _check_type(f"{key}.{sub}", section.get(sub, default), kind)
                if sub in section
                else default
                for sub, (kind, default) in spec.items()
            }
        else:
            kind, default = spec
            value = raw.get(key, default)
            resolved[key] = _check_type(key, value, kind) if key in raw else default
    for key in raw:
        if key not in _SCHEMA:
            raise SchemaError(key, "unknown field")
    return resolved


def _config_hash(resolved):
    blob = json.dumps(resolved, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _execute_run(resolved, out_dir):
    """Run one resolved config and write all artifacts into out_dir."""
    from . import bench, checkpoint
    from .align import AlignConfig
    from .allocator import AllocConfig
    from .trainer import TrainConfig

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(
        json.dumps(resolved, sort_keys=True, indent=2) + "\n"
    )

    s = resolved["stream"]
    stream = bench.make_synthetic_stream(
        num_tasks=s["num_tasks"],
        classes_per_task=s["classes_per_task"],
        feature_dim=s["feature_dim"],
        separation=s["separation"],
        seed=s["seed"],
        mode=s["mode"],
        samples_per_class=s["samples_per_class"],
    )
    result, model = bench.run_continual(
        stream,
        resolved["strategy"],
        train_cfg=TrainConfig(**resolved["train"]),
        alloc_cfg=AllocConfig(**resolved["alloc"]),
        align_cfg=AlignConfig(**resolved["align"]),
        hidden_dim=resolved["model"]["hidden_dim"],
        out_dim=resolved["model"]["out_dim"],
        return_model=True,
    )

    lines = ["step,acc"]
    for i, acc in enumerate(result.report.per_step, start=1):
        lines.append(f"{i},{_fmt(acc)}")
    (out / "metrics.csv").write_text("\n".join(lines) + "\n")

    summary = {
        "last_acc": result.report.last_acc,
        "inc_acc": result.report.inc_acc,
        "config_hash": _config_hash(resolved),
        "seed": resolved["train"]["seed"],
        "strategy": resolved["strategy"],
    }
    (out / "summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n"
    )

    lines = ["task,layer,rank_index,sigma"]
    for task, layer, spectrum in result.spectra:
        for i, sig in enumerate(spectrum.sigma):
            lines.append(f"{task},{layer},{i},{_fmt(sig)}")
    (out / "spectra.csv").write_text("\n".join(lines) + "\n")

    with open(out / "train.log", "w") as fh:
        for rec in result.plan_records:
            fh.write(json.dumps({"kind": "allocation", **rec}, sort_keys=True) + "\n")
        for rec in result.train_records:
            fh.write(json.dumps({"kind": "epoch", **rec}, sort_keys=True) + "\n")

    if resolved["checkpoint"]:
        pairs = [p for layer in model.layers for p in layer.pairs]
        live = result.live_spectra or {}
        spectra = [(li, sp) for li, specs in sorted(live.items()) for sp in specs]
        checkpoint.save_checkpoint(
            out / "checkpoint.bin",
            pairs=pairs,
            spectra=spectra,
            pools=result.pools,
            stats=result.stats,
            model=model,
        )
    return summary


def _run_for_seed(args):
    resolved, seed, out_dir = args
    cfg = json.loads(json.dumps(resolved))
    cfg["stream"]["seed"] = seed
    cfg["train"]["seed"] = seed
    cfg["align"]["seed"] = seed
    return _execute_run(cfg, out_dir)


def cmd_run(args):
    try:
        raw = json.loads(Path(args.config).read_text())
    except FileNotFoundError:
        print(f"config not found: {args.config}", file=sys.stderr)
        return 2
    except json.JSONDecodeError as exc:
        print(f"config is not valid JSON: {exc}", file=sys.stderr)
        return 2
    try:
        resolved = resolve_config(raw)
    except SchemaError as exc:
        print(f"config error at {exc.field}: {exc}", file=sys.stderr)
        return 2

    if args.out:
        resolved["out_dir"] = args.out
    seeds = None
    if args.seed is not None:
        seeds = [int(s) for s in str(args.seed).split(",")]

    try:
        if seeds is None or len(seeds) == 1:
            if seeds:
                resolved["stream"]["seed"] = seeds[0]
                resolved["train"]["seed"] = seeds[0]
                resolved["align"]["seed"] = seeds[0]
            summary = _execute_run(resolved, resolved["out_dir"])
            print(json.dumps(summary, sort_keys=True))
        else:
            jobs = [
                (resolved, s, str(Path(resolved["out_dir"]) / f"seed_{s}"))
                for s in seeds
            ]
            if args.jobs > 1:
                with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                    for summary in pool.map(_run_for_seed, jobs):
                        print(json.dumps(summary, sort_keys=True))
            else:
                for job in jobs:
                    print(json.dumps(_run_for_seed(job), sort_keys=True))
    except DivergenceError as exc:
        print(f"run diverged: {exc}", file=sys.stderr)
        return 3
    except ValidationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return 0


def cmd_verify(args):
    from .oracle import SUITES, run_orthogonality_suite

    names = list(SUITES) if args.suite == "all" else [args.suite]
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        print(f"unknown suite {unknown[0]!r}; choose from "
              f"{', '.join([*SUITES, 'all'])}", file=sys.stderr)
        return 2

    reports = []
    for name in names:
        if name == "orthogonality":
            reports.extend(run_orthogonality_suite(inject_bug=args.inject_bug))
        else:
            reports.extend(SUITES[name]())

    out = Path(args.out)
    with open(out, "w") as fh:
        for rep in reports:
            fh.write(json.dumps(rep.to_dict(), sort_keys=True) + "\n")

    failed = [r for r in reports if not r.passed]
    by_name = {}
    for rep in reports:
        ok, total = by_name.get(rep.name, (0, 0))
        by_name[rep.name] = (ok + int(rep.passed), total + 1)
    for name, (ok, total) in sorted(by_name.items()):
        print(f"{name}: {ok}/{total} passed")
    print(f"report written to {out}")
    return 0 if not failed else 1


def cmd_spectra(args):
    run_dir = Path(args.run_dir)
    src = run_dir / "spectra.csv"
    if not src.exists():
        print(f"no spectra.csv in {run_dir}", file=sys.stderr)
        return 2
    rows = []
    with open(src) as fh:
        header = fh.readline()
        if header.strip() != "task,layer,rank_index,sigma":
            print("unrecognized spectra.csv header", file=sys.stderr)
            return 2
        for line in fh:
            task, layer, idx, sigma = line.strip().split(",")
            rows.append((int(task), int(layer), int(idx), float(sigma)))

    energy = {}
    groups = {}
    for task, layer, idx, sigma in rows:
        energy[task] = energy.get(task, 0.0) + sigma * sigma
        groups.setdefault((task, layer), []).append((idx, sigma))

    lines = ["task,total_energy"]
    for task in sorted(energy):
        lines.append(f"{task},{_fmt(energy[task])}")
    (run_dir / "energy.csv").write_text("\n".join(lines) + "\n")

    lines = ["task,layer,rank_index,rank_fraction,energy_fraction"]
    for (task, layer) in sorted(groups):
        sigmas = [s for _, s in sorted(groups[(task, layer)])]
        total = sum(s * s for s in sigmas)
        cum = 0.0
        for i, s in enumerate(sigmas):
            cum += s * s
            frac = cum / total if total > 0 else 0.0
            lines.append(
                f"{task},{layer},{i},{_fmt((i + 1) / len(sigmas))},{_fmt(frac)}"
            )
    (run_dir / "curves.csv").write_text("\n".join(lines) + "\n")

    tasks = sorted(energy)
    if len(tasks) > 1:
        first, last = energy[tasks[0]], energy[tasks[-1]]
        trend = ">=" if first >= last else "<"
        print(
            f"observation: first-task energy {_fmt(first)} {trend} "
            f"last-task energy {_fmt(last)}"
        )
    print(f"wrote {run_dir / 'energy.csv'} and {run_dir / 'curves.csv'}")
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="e2lora", description="continual-learning experiment runner"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a configured continual run")
    p_run.add_argument("config", help="path to a JSON config")
    p_run.add_argument("--seed", default=None,
                       help="seed override; comma-separate to fan out")
    p_run.add_argument("--out", default=None, help="output directory override")
    p_run.add_argument("--jobs", type=int, default=1,
                       help="parallel worker processes for multi-seed runs")
    p_run.set_defaults(func=cmd_run)

    p_ver = sub.add_parser("verify", help="run oracle batteries")
    p_ver.add_argument("suite", help="truncation|optimality|orthogonality|"
                                     "pruning|gradients|all")
    p_ver.add_argument("--out", default="verify_report.jsonl",
                       help="JSON-lines report path")
    p_ver.add_argument("--inject-bug", action="store_true",
                       help="append a corrupted instance that must fail "
                            "(negative-control fixture)")
    p_ver.set_defaults(func=cmd_verify)

    p_spec = sub.add_parser("spectra", help="summarize a run's spectra")
    p_spec.add_argument("run_dir", help="directory containing spectra.csv")
    p_spec.set_defaults(func=cmd_spectra)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
