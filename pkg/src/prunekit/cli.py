"""Command-line front end.

Subcommands wire the pipeline stages together: ``analyze`` scores every unit
and exports the records, ``plan`` selects a removal set for a FLOP target,
``prune`` applies a plan (or drives the iterative multi-pass scheme), and
``report`` compares a pruned model against its baseline. Configuration comes
from defaults, then a key=value config file, then a preset, then explicit
flags, each layer overriding the previous one.

Exit codes: 0 success, 2 validation failure, 3 infeasible budget, 4 I/O error.
Failures emit a machine-parsable JSON object on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

from . import __version__
from .costs import effective_model_costs, model_flop_count, model_param_count
from .errors import GraphValidationError, InfeasibleBudgetError, PruneKitError
from .graph import ModelGraph, infer_shapes, load_model, save_model, validate as validate_graph
from .planner import PruningPlan, multi_pass, select_threshold
from .scoring import Config, records_to_csv, records_to_json, score_all
from .surgeon import apply_plan
from .units import build_prune_units

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_INFEASIBLE = 3
EXIT_IO = 4


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except GraphValidationError as e:
        return _fail("validation", str(e), EXIT_VALIDATION, violations=e.violations)
    except InfeasibleBudgetError as e:
        return _fail("infeasible-budget", str(e), EXIT_INFEASIBLE, best_frr=e.best_frr)
    except PruneKitError as e:
        return _fail(type(e).__name__, str(e), EXIT_VALIDATION)
    except OSError as e:
        return _fail("io", str(e), EXIT_IO)


def _fail(code: str, message: str, exit_code: int, **details) -> int:
    payload = {"error": {"code": code, "message": message}}
    if details:
        payload["error"].update(details)
    print(json.dumps(payload), file=sys.stderr)
    return exit_code


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prunekit", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"prunekit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, model: bool = True) -> None:
        if model:
            p.add_argument("--model", required=True, help="model manifest (JSON)")
            p.add_argument("--weights", help="weight container (defaults to manifest's weights_file)")
        p.add_argument("--out-dir", default=".", help="directory for produced artifacts")
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--preset", choices=sorted(Config.PRESETS), help="alpha/beta preset")
        p.add_argument("--alpha", type=float)
        p.add_argument("--beta", type=float)
        p.add_argument("--flop-target", type=float, dest="flop_target")
        p.add_argument("--param-target", type=float, dest="param_target", help="optional secondary budget")
        p.add_argument("--weight-norm", choices=["max-min", "max", "log"], dest="weight_norm")
        p.add_argument("--mode", choices=["cpmc", "cpmc-a"], help="cpmc-a scores out-channels only")
        p.add_argument("--flops-convention", choices=["macs", "2macs"], dest="flops_convention")
        p.add_argument("--min-channels", type=int, dest="min_channels")
        p.add_argument("--passes", type=int)
        p.add_argument("--per-pass", type=float, dest="per_pass")

    p = sub.add_parser("analyze", help="score all prunable units and export records")
    common(p)
    p.add_argument("--dump-units", action="store_true", help="also export the unit inventory")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("plan", help="select a removal set meeting the FLOP target")
    common(p)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("prune", help="apply a plan (or run the multi-pass driver)")
    common(p)
    p.add_argument("--plan", help="plan file from `prunekit plan` (single-pass mode)")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("report", help="compare a pruned model against its baseline")
    p.add_argument("--baseline", required=True, help="baseline model manifest")
    p.add_argument("--baseline-weights")
    p.add_argument("--pruned", required=True, help="pruned model manifest")
    p.add_argument("--pruned-weights")
    p.add_argument("--out-dir", default=".")
    p.add_argument("--flops-convention", choices=["macs", "2macs"], dest="flops_convention", default="macs")
    p.set_defaults(func=cmd_report)
    return parser


def _parse_config_file(path: str) -> dict:
    values: dict = {}
    field_types = {f: t for f, t in Config.__annotations__.items()}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise PruneKitError(f"{path}:{lineno}: expected key=value")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in field_types:
                raise PruneKitError(f"{path}:{lineno}: unknown config key {key!r}")
            raw = raw.strip("\"'")
            if raw.lower() in ("true", "false"):
                values[key] = raw.lower() == "true"
            else:
                try:
                    values[key] = int(raw)
                except ValueError:
                    try:
                        values[key] = float(raw)
                    except ValueError:
                        values[key] = raw
    return values


def _make_config(args: argparse.Namespace) -> Config:
    config = Config()
    if getattr(args, "config", None):
        for key, value in _parse_config_file(args.config).items():
            setattr(config, key, value)
    if getattr(args, "preset", None):
        config.apply_preset(args.preset)
    overrides = {
        "alpha": "alpha",
        "beta": "beta",
        "flop_target": "flop_target_ratio",
        "param_target": "param_target_ratio",
        "weight_norm": "weight_norm_mode",
        "flops_convention": "flops_convention",
        "min_channels": "min_channels_per_layer",
        "passes": "passes",
        "per_pass": "per_pass_ratio",
    }
    for arg_name, field in overrides.items():
        value = getattr(args, arg_name, None)
        if value is not None:
            setattr(config, field, value)
    mode = getattr(args, "mode", None)
    if mode is not None:
        config.use_in_channel = mode != "cpmc-a"
    config.validate()
    return config


def _load(args: argparse.Namespace) -> ModelGraph:
    graph = load_model(args.model, getattr(args, "weights", None))
    violations = validate_graph(graph)
    if violations:
        raise GraphValidationError(violations)
    return infer_shapes(graph)


def _file_checksum(path: str) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def _write(out_dir: str, name: str, text: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)
    return path


class _RunManifest:
    def __init__(self, command: str, args: argparse.Namespace, config: Config | None):
        self.started = time.monotonic()
        self.data = {
            "tool": f"prunekit {__version__}",
            "command": command,
            "config": config.to_dict() if config else None,
            "inputs": {},
            "artifacts": [],
            "timings": {},
        }
        for attr in ("model", "weights", "plan", "baseline", "pruned"):
            path = getattr(args, attr, None)
            if path and os.path.exists(path):
                self.data["inputs"][attr] = {"path": path, "sha256": _file_checksum(path)}

    def add(self, path: str) -> None:
        self.data["artifacts"].append({"path": path, "sha256": _file_checksum(path)})

    def write(self, out_dir: str) -> None:
        self.data["timings"]["total_s"] = round(time.monotonic() - self.started, 6)
        _write(out_dir, "run_manifest.json", json.dumps(self.data, indent=2) + "\n")


def cmd_analyze(args: argparse.Namespace) -> int:
    config = _make_config(args)
    run = _RunManifest("analyze", args, config)
    graph = _load(args)
    units = build_prune_units(graph)
    records = score_all(graph, units, config)
    run.add(_write(args.out_dir, "records.csv", records_to_csv(records)))
    run.add(_write(args.out_dir, "records.json", records_to_json(records)))
    if args.dump_units:
        inventory = json.dumps([u.to_json() for u in units], indent=2) + "\n"
        run.add(_write(args.out_dir, "units.json", inventory))
    params, flops = effective_model_costs(
        graph, convention=config.flops_convention, count_aux_params=config.count_aux_params
    )
    print(f"scored units: {len(units)}")
    print(f"total output channels: {graph.total_channels()}")
    print(f"baseline params: {params}")
    print(f"baseline flops ({config.flops_convention}): {flops}")
    print("layer widths: " + ", ".join(f"{n.id}={n.declared_out_width()}" for n in graph.weighted_layers()))
    run.write(args.out_dir)
    return EXIT_OK


def cmd_plan(args: argparse.Namespace) -> int:
    config = _make_config(args)
    run = _RunManifest("plan", args, config)
    graph = _load(args)
    units = build_prune_units(graph)
    records = score_all(graph, units, config)
    plan = select_threshold(records, graph, config)
    run.add(_write(args.out_dir, "plan.json", plan.to_json()))
    print(f"threshold: {plan.threshold}")
    print(f"removed units: {len(plan.removed_unit_ids)}")
    print(f"predicted Prr: {plan.prr:.4f}")
    print(f"predicted Frr: {plan.frr:.4f}")
    run.write(args.out_dir)
    return EXIT_OK


def cmd_prune(args: argparse.Namespace) -> int:
    config = _make_config(args)
    run = _RunManifest("prune", args, config)
    graph = _load(args)
    out_dir = args.out_dir

    if config.passes > 1 or (config.per_pass_ratio is not None and not args.plan):
        if config.per_pass_ratio is None:
            raise PruneKitError("multi-pass pruning needs --per-pass")
        trajectory = multi_pass(graph, config, config.per_pass_ratio)
        pruned = trajectory[-1][1]
        for i, (plan, _stage) in enumerate(trajectory, 1):
            run.add(_write(out_dir, f"plan_pass{i}.json", plan.to_json()))
        report_dict = {
            "passes": len(trajectory),
            "per_pass_ratio": config.per_pass_ratio,
            "final_frr": 1.0 - model_flop_count(pruned, config.flops_convention)
            / model_flop_count(graph, config.flops_convention),
        }
    else:
        if not args.plan:
            raise PruneKitError("single-pass pruning needs --plan (or use --passes with --per-pass)")
        with open(args.plan, "r", encoding="utf-8") as f:
            plan = PruningPlan.from_json(f.read())
        pruned, report = apply_plan(graph, plan)
        report_dict = report.to_dict()

    os.makedirs(out_dir, exist_ok=True)
    manifest_path = os.path.join(out_dir, "pruned_manifest.json")
    weights_path = os.path.join(out_dir, "pruned_weights.bin")
    save_model(pruned, manifest_path, weights_path)
    run.add(manifest_path)
    run.add(weights_path)
    run.add(_write(out_dir, "surgery_report.json", json.dumps(report_dict, indent=2) + "\n"))
    print(f"pruned model: {manifest_path}")
    print(f"post params: {model_param_count(pruned, config.count_aux_params)}")
    print(f"post flops ({config.flops_convention}): {model_flop_count(pruned, config.flops_convention)}")
    run.write(out_dir)
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    run = _RunManifest("report", args, None)
    baseline = load_model(args.baseline, args.baseline_weights)
    pruned = load_model(args.pruned, args.pruned_weights)
    infer_shapes(baseline)
    infer_shapes(pruned)
    convention = args.flops_convention
    base_params = model_param_count(baseline)
    base_flops = model_flop_count(baseline, convention)
    post_params = model_param_count(pruned)
    post_flops = model_flop_count(pruned, convention)
    prr = 1.0 - post_params / base_params
    frr = 1.0 - post_flops / base_flops

    rows = []
    pruned_widths = {n.id: n.declared_out_width() for n in pruned.weighted_layers()}
    for node in baseline.weighted_layers():
        before = node.declared_out_width()
        after = pruned_widths.get(node.id, 0)
        rows.append((node.id, before, after, before - after))

    payload = {
        "baseline": {"params": base_params, "flops": base_flops},
        "pruned": {"params": post_params, "flops": post_flops},
        "prr": prr,
        "frr": frr,
        "flops_convention": convention,
        "layers": [{"layer": r[0], "before": r[1], "after": r[2], "removed": r[3]} for r in rows],
        "note": "fine-tuning required to recover accuracy (out of scope)",
    }
    run.add(_write(args.out_dir, "report.json", json.dumps(payload, indent=2) + "\n"))

    name_w = max(len(r[0]) for r in rows)
    lines = [f"{'layer'.ljust(name_w)}  before   after  removed"]
    for lid, before, after, removed in rows:
        lines.append(f"{lid.ljust(name_w)}  {before:6d}  {after:6d}  {removed:7d}")
    lines.append("")
    lines.append(f"params: {base_params} -> {post_params}  (Prr {prr:.4f})")
    lines.append(f"flops ({convention}): {base_flops} -> {post_flops}  (Frr {frr:.4f})")
    lines.append("fine-tuning required to recover accuracy (out of scope)")
    text = "\n".join(lines) + "\n"
    run.add(_write(args.out_dir, "report.txt", text))
    print(text, end="")
    run.write(args.out_dir)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
