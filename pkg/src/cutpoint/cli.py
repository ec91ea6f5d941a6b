"""Command line driver.

Every command writes deterministic artifacts into ``--out`` plus one
``<stem>.<command>.meta.json`` sidecar holding run metadata (time, argv,
artifact digests).  Errors print a single JSON line on stderr; the exit
status is 0 on success, 1 when no policy satisfies the budgets and 2 on any
other error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

from . import __version__
from .codegen import (emit_instructions, instruction_listing, pack_image,
                      synthesize_input, synthesize_weights)
from .cost_model import evaluate_policy
from .errors import CompileError, InfeasibleError
from .graph_ir import parse_network, plan_network
from .hw import HwConfig, MB
from .latency_sim import simulate_network, sweep_csv, sweep_cut_points
from .optimizer import Constraints, minimum_buffer_search, search_cut_points
from .policy import ReusePolicy
from .zoo import model_path, shipped_models

CONFIG_ENV = "CUTPOINT_CONFIG_DIR"
CONFIG_FILE = "hw.json"

EXIT_OK, EXIT_INFEASIBLE, EXIT_ERROR = 0, 1, 2


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# inputs


def load_document(model, input_size=None):
    """Network document from a shipped model name or a JSON file."""
    if os.path.isfile(model):
        path = model
    elif model in shipped_models():
        path = model_path(model)
    else:
        raise UsageError(f"no model file or shipped model named {model!r}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: not valid JSON ({exc})") from None
    if input_size is not None:
        if input_size <= 0:
            raise UsageError("--input-size must be positive")
        doc.setdefault("input", {})
        doc["input"]["w"] = doc["input"]["h"] = input_size
    return doc


def _config_defaults(path):
    if path is None:
        cfg_dir = os.environ.get(CONFIG_ENV)
        if not cfg_dir:
            return {}
        path = os.path.join(cfg_dir, CONFIG_FILE)
        if not os.path.isfile(path):
            return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must be a JSON object")
    known = set(HwConfig.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise UsageError(f"config {path}: unknown field(s) {sorted(unknown)}")
    return data


def build_hw(args):
    fields = _config_defaults(args.config)
    if args.ti is not None or args.to is not None:
        t_i = args.ti if args.ti is not None else args.to
        t_o = args.to if args.to is not None else args.ti
        if t_i != t_o:
            raise UsageError("--ti and --to must be equal")
        fields.update(t_i=t_i, t_o=t_o, n_mac=2 * t_i * t_o)
    for flag, name in (("bits", "q_a"), ("bram_budget", "bram_budget"),
                       ("mac_budget", "mac_budget"), ("bus_bytes", "bus_bytes")):
        v = getattr(args, flag)
        if v is not None:
            fields[name] = v
    try:
        return HwConfig(**fields)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad hardware configuration: {exc}") from None


def parse_cut_points(text, plan):
    try:
        cp = tuple(int(x) for x in text.split(",") if x.strip() != "")
    except ValueError:
        raise UsageError(f"--cut-points expects integers, got {text!r}") from None
    try:
        return ReusePolicy.from_cut_points(plan.segments, cp)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def load_policy(path, plan):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        schemes = tuple(data["schemes"])
        cp = data.get("cut_points")
        policy = ReusePolicy(schemes, tuple(cp) if cp is not None else None)
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"cannot read policy {path}: {exc}") from None
    if len(policy) != len(plan.blocks):
        raise UsageError(f"policy {path} covers {len(policy)} blocks, "
                         f"the model has {len(plan.blocks)}")
    return policy


# --------------------------------------------------------------------------
# outputs


class Outputs:
    def __init__(self, directory, stem, command):
        self.dir = directory
        self.stem = stem
        self.command = command
        self.written = []
        os.makedirs(directory, exist_ok=True)

    def write(self, suffix, data):
        path = os.path.join(self.dir, f"{self.stem}.{suffix}")
        mode = "wb" if isinstance(data, (bytes, bytearray)) else "w"
        with open(path, mode, **({} if mode == "wb" else {"encoding": "utf-8",
                                                          "newline": "\n"})) as fh:
            fh.write(data)
        self.written.append(path)
        return path

    def sidecar(self, argv, extra=None):
        digests = {}
        for p in self.written:
            with open(p, "rb") as fh:
                digests[os.path.basename(p)] = hashlib.sha256(fh.read()).hexdigest()
        meta = {"command": self.command, "argv": list(argv), "version": __version__,
                "created_unix": time.time(), "artifacts": digests}
        if extra:
            meta.update(extra)
        path = os.path.join(self.dir, f"{self.stem}.{self.command}.meta.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path


def policy_json(policy):
    return json.dumps({"schemes": list(policy.schemes),
                       "cut_points": list(policy.cut_points)
                       if policy.cut_points is not None else None},
                      indent=2) + "\n"


def hw_text(hw):
    return "".join(f"hw.{k}: {v}\n" for k, v in sorted(vars(hw).items()))


# --------------------------------------------------------------------------
# commands


def _select_policy(args, plan, hw):
    if getattr(args, "policy", None):
        return load_policy(args.policy, plan)
    if getattr(args, "cut_points", None) is not None:
        return parse_cut_points(args.cut_points, plan)
    return search_cut_points(plan, hw).policy


def cmd_compile(args, plan, hw, out):
    policy = _select_policy(args, plan, hw)
    report, assignment = evaluate_policy(plan, policy, hw)
    program = emit_instructions(plan, report.policy, assignment, hw)
    weights = synthesize_weights(plan.graph, hw.q_a, args.seed)
    image = pack_image(program, weights, synthesize_input(plan.graph, hw.q_a, args.seed))
    out.write("img", image)
    out.write("lst", instruction_listing(program))
    out.write("policy.json", policy_json(report.policy))
    rows = assignment.records(plan)
    head = "layer,group,block,scheme,alloc_in,alloc_out,alloc_shortcut," \
           "in_offset,out_offset,side_offset\n"
    out.write("alloc.csv", head + "".join(
        ",".join(str(r[k]) for k in head.strip().split(",")) + "\n" for r in rows))
    return {"instructions": len(program), "image_bytes": len(image)}


def cmd_pack(args, plan, hw, out):
    if not args.policy and args.cut_points is None:
        raise UsageError("pack needs --policy or --cut-points")
    return cmd_compile(args, plan, hw, out)


def cmd_optimize(args, plan, hw, out):
    result = search_cut_points(plan, hw, Constraints(args.mac_budget, args.bram_budget))
    rep = result.report
    text = rep.summary() + hw_text(hw) + \
        f"candidates_evaluated: {result.evaluated}\n" \
        f"candidates_feasible: {result.feasible}\n"
    out.write("optimize.txt", text)
    out.write("optimize.csv", rep.csv())
    out.write("policy.json", policy_json(rep.policy))
    return {"cut_points": list(rep.policy.cut_points or ()),
            "offchip_reduction_pct": round(100 * rep.reduction, 4)}


def cmd_sweep(args, plan, hw, out):
    points = sweep_cut_points(plan, hw)
    out.write("sweep.csv", sweep_csv(points))
    best = min(points, key=lambda p: (p.sram, p.cut_points))
    return {"points": len(points), "min_sram_first_frame_layer": best.first_frame_layer}


def cmd_simulate(args, plan, hw, out):
    policy = _select_policy(args, plan, hw)
    report, assignment = evaluate_policy(plan, policy, hw)
    lat = simulate_network(report.policy, plan, hw, assignment)
    out.write("latency.csv", lat.table())
    out.write("trace.txt", lat.trace_text())
    out.write("simulate.txt",
              f"cut_points: {list(report.policy.cut_points or ())}\n"
              f"cycles: {lat.cycles}\nms: {lat.ms:.4f}\ngops: {lat.gops:.2f}\n"
              f"trace_bytes: {lat.trace_bytes}\n")
    return {"cycles": lat.cycles}


def cmd_report(args, plan, hw, out):
    best = search_cut_points(plan, hw, Constraints(args.mac_budget, args.bram_budget))
    minbuf = minimum_buffer_search(plan, hw)
    all_row = ReusePolicy.all_row(plan)
    row_rep, row_asg = evaluate_policy(plan, all_row, hw)
    row_lat = simulate_network(row_rep.policy, plan, hw, row_asg)
    rows = [("optimized", best.report, best.latency.cycles),
            ("minimum_buffer", minbuf.report, minbuf.latency.cycles),
            ("all_row", row_rep, row_lat.cycles)]
    head = ("policy,cut_points,sram_bytes,sram_mb,bram18k,feature_dram_mb,"
            "total_dram_mb,baseline_dram_mb,offchip_reduction_pct,cycles,speedup\n")
    lines = [head]
    for name, rep, cycles in rows:
        cp = "-".join(map(str, rep.policy.cut_points or ()))
        lines.append(f"{name},{cp},{rep.buffers.sram_total},"
                     f"{rep.buffers.sram_total / MB:.4f},{rep.buffers.bram18k_total},"
                     f"{rep.feature_bytes / MB:.4f},{rep.total_bytes / MB:.4f},"
                     f"{rep.baseline_bytes / MB:.4f},{100 * rep.reduction:.2f},"
                     f"{cycles},{row_lat.cycles / cycles if cycles else 0:.4f}\n")
    out.write("report.csv", "".join(lines))
    text = ["# optimized\n", best.report.summary(),
            "# minimum buffer\n", minbuf.report.summary(),
            "# all row-reuse\n", row_rep.summary(), hw_text(hw)]
    out.write("report.txt", "".join(text))
    return {}


COMMANDS = {"compile": cmd_compile, "pack": cmd_pack, "optimize": cmd_optimize,
            "sweep": cmd_sweep, "simulate": cmd_simulate, "report": cmd_report}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("model_arg", nargs="?", metavar="MODEL",
                        help="shipped model name or network JSON file")
    common.add_argument("--model", help="same as the positional MODEL")
    common.add_argument("--input-size", type=int, help="override input width/height")
    common.add_argument("--ti", type=int, help="input-channel parallelism T_i")
    common.add_argument("--to", type=int, help="output-channel parallelism T_o")
    common.add_argument("--bits", type=int, choices=(8, 16), help="activation width Q_A")
    common.add_argument("--bram-budget", "--bram", type=int, dest="bram_budget",
                        help="BRAM18K budget (beta)")
    common.add_argument("--mac-budget", type=int, help="MAC budget (alpha)")
    common.add_argument("--bus-bytes", type=int, help="DRAM bytes per cycle")
    common.add_argument("--config", help=f"JSON hardware config (default: "
                        f"${CONFIG_ENV}/{CONFIG_FILE} when set)")
    common.add_argument("--out", default=".", help="output directory")

    parser = argparse.ArgumentParser(prog="cutpoint", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {"compile": "optimize (unless a policy is given) and emit an image",
             "pack": "emit an image for an explicit policy",
             "optimize": "search cut-points under the budgets",
             "sweep": "buffer, traffic and latency for every cut-point tuple",
             "simulate": "latency table and off-chip trace of one policy",
             "report": "optimized, minimum-buffer and all-row comparison"}
    for name, text in helps.items():
        p = sub.add_parser(name, parents=[common], help=text)
        if name in ("compile", "pack", "simulate"):
            g = p.add_mutually_exclusive_group()
            g.add_argument("--cut-points", help="comma-separated cut-point tuple")
            g.add_argument("--policy", help="policy JSON written by optimize")
        if name in ("compile", "pack"):
            p.add_argument("--seed", type=int, default=0,
                           help="seed of the synthesized weights and input")
    return parser


def _error(kind, exc, **extra):
    record = {"error": kind, "type": type(exc).__name__, "message": str(exc)}
    record.update({k: v for k, v in extra.items() if v is not None})
    print(json.dumps(record, sort_keys=True), file=sys.stderr)


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    try:
        model = args.model or args.model_arg
        if not model:
            raise UsageError("no model given")
        if args.model and args.model_arg and args.model != args.model_arg:
            raise UsageError("MODEL and --model disagree")
        hw = build_hw(args)
        graph = parse_network(load_document(model, args.input_size))
        plan = plan_network(graph)
        stem = os.path.splitext(os.path.basename(model))[0]
        out = Outputs(args.out, stem, args.command)
        summary = COMMANDS[args.command](args, plan, hw, out)
        out.sidecar(argv, {"summary": summary})
    except InfeasibleError as exc:
        _error("infeasible", exc, constraint=exc.constraint, value=exc.value,
               limit=exc.limit)
        return EXIT_INFEASIBLE
    except (UsageError, CompileError, OSError, ValueError) as exc:
        _error("error", exc)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
