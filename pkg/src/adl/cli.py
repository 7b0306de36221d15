"""Command-line entry point.

Subcommands: check, run, dist, symrun, embed, equiv, tv, harmonize.
Exit codes: 0 success/equivalent, 1 inequivalent or failed check, 2 usage
error.  All subcommands are deterministic given their flags and seed; the
ADL_CONFIG environment variable may point at a JSON file overriding the
defaults below.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field

from .bytecode import parse, render, static_rand_scan, validate
from .concrete_vm import (
    AdvOut,
    ConstAttacker,
    EchoBitAttacker,
    NullAttacker,
    Rng,
    ScriptedAttacker,
    Stuck,
    Timeout,
    ValueFinal,
    Vm,
    output_distribution,
    render_value,
    run,
)
from .cosp import embed, export_tree
from .crypto_api import BitFlipLibrary, ImplLibrary, harmonize_check
from .deduction import view_to_json
from .equiv import sym_equiv, tic_estimate
from .session import load_context
from .symbolic_vm import enumerate_views
from .terms import render_op


@dataclass
class Config:
    """Defaults for widths, seeds, and budgets; overridable via ADL_CONFIG
    (JSON) and per-flag."""

    width: int = 64
    seed: int = 0
    steps: int = 100_000
    interactions: int = 2
    recipe_depth: int = 3
    max_nodes: int = 64
    trials: int = 10_000
    registry: str = ""

    def validate(self):
        if not (2 <= self.width <= 64):
            raise ValueError("width must be in [2, 64]")
        for name in ("steps", "interactions", "recipe_depth", "max_nodes", "trials"):
            if getattr(self, name) < 0:
                raise ValueError("{} must be >= 0".format(name))


def load_config() -> Config:
    cfg = Config()
    path = os.environ.get("ADL_CONFIG")
    if path:
        with open(path) as fh:
            data = json.load(fh)
        for k, v in data.items():
            if hasattr(cfg, k):
                setattr(cfg, k, v)
    cfg.validate()
    return cfg


def _context(path: str, args, cfg: Config):
    with open(path) as fh:
        source = fh.read()
    registry_json = None
    reg_path = getattr(args, "registry", None) or cfg.registry
    if reg_path:
        with open(reg_path) as fh:
            registry_json = fh.read()
    return load_context(source, args.width, registry_json)


def _attacker(spec: str):
    if not spec:
        return NullAttacker()
    if spec == "builtin:echo-bit":
        return EchoBitAttacker()
    if spec.startswith("builtin:const:"):
        return ConstAttacker(spec.rsplit(":", 1)[1])
    with open(spec) as fh:
        return ScriptedAttacker.from_text(fh.read())


def _emit(args, payload: dict, text_lines):
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        for line in text_lines:
            print(line)


def cmd_check(args, cfg) -> int:
    ctx = _context(args.file, args, cfg)
    diags = validate(ctx.program) + static_rand_scan(ctx.program, args.entry)
    _emit(args, {"diagnostics": [str(d) for d in diags]},
          [str(d) for d in diags] or ["ok"])
    return 0 if not diags else 1


def cmd_run(args, cfg) -> int:
    ctx = _context(args.file, args, cfg)
    vm = Vm(ctx.program, args.width)
    res = run(vm, vm.initial_state(args.entry), Rng(args.seed), _attacker(args.attacker),
              args.max_steps)
    final = res.final
    if isinstance(final, ValueFinal):
        out = {"kind": "value", "value": render_value(final.value)}
        text = "value {}".format(render_value(final.value))
    elif isinstance(final, AdvOut):
        out = {"kind": "advout", "token": final.token}
        text = "advout {}".format(final.token)
    elif isinstance(final, Stuck):
        out = {"kind": "stuck", "rule": final.rule, "reason": final.reason}
        text = "stuck {} ({})".format(final.rule, final.reason)
    else:
        out = {"kind": "timeout"}
        text = "timeout"
    out["steps"] = res.total_steps
    out["trace"] = [list(map(str, ev)) for ev in res.trace]
    _emit(args, out, [text, "steps {}".format(res.total_steps)]
          + ["event {}".format(" ".join(map(str, ev))) for ev in res.trace])
    return 0


def cmd_dist(args, cfg) -> int:
    ctx = _context(args.file, args, cfg)
    vm = Vm(ctx.program, args.width)
    mode = "exhaustive" if args.exhaustive else "montecarlo"
    dist = output_distribution(
        vm, lambda: vm.initial_state(args.entry), _attacker(args.attacker),
        mode=mode, trials=args.trials, max_steps=args.max_steps, seed=args.seed,
    )
    rows = sorted((str(k), v) for k, v in dist.items())
    _emit(args, {"mode": mode, "distribution": [[k, str(v)] for k, v in rows]},
          ["{}  {}".format(v, k) for k, v in rows])
    return 0


def cmd_symrun(args, cfg) -> int:
    ctx = _context(args.file, args, cfg)
    vm = ctx.sym_vm()
    views = enumerate_views(vm, vm.initial_state(args.entry), args.budget, args.recipe_depth)
    rendered = sorted(view_to_json(v) for v in views)
    _emit(args, {"views": [json.loads(r) for r in rendered]},
          ["{} views".format(len(rendered))] + rendered)
    return 0


def cmd_embed(args, cfg) -> int:
    ctx = _context(args.file, args, cfg)
    tree = embed(ctx.program, args.width, ctx.model, ctx.libspec, args.entry)
    doc = export_tree(tree, args.max_nodes)
    text = json.dumps(doc, indent=None, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
        print("wrote {} nodes to {}".format(len(doc["nodes"]), args.out))
    else:
        print(text)
    return 0


def cmd_equiv(args, cfg) -> int:
    ctx1 = _context(args.file_a, args, cfg)
    ctx2 = _context(args.file_b, args, cfg)
    vm1, vm2 = ctx1.sym_vm(), ctx2.sym_vm()
    verdict = sym_equiv(
        vm1, vm1.initial_state(args.entry), vm2, vm2.initial_state(args.entry),
        args.budget, args.recipe_depth,
    )
    payload = {
        "status": verdict.status,
        "budget": verdict.interaction_budget,
        "recipe_depth": verdict.recipe_depth,
        "reason": verdict.reason,
        "witness": verdict.witness.render() if verdict.witness else None,
        "witness_recipe": render_op(verdict.witness_recipe) if verdict.witness_recipe else None,
    }
    text = [verdict.status]
    if verdict.reason:
        text.append("reason: {}".format(verdict.reason))
    if verdict.witness_recipe is not None:
        text.append("witness recipe: {}".format(render_op(verdict.witness_recipe)))
    _emit(args, payload, text)
    return 0 if verdict.equivalent else 1


def cmd_tv(args, cfg) -> int:
    ctx1 = _context(args.file_a, args, cfg)
    ctx2 = _context(args.file_b, args, cfg)
    vm1 = Vm(ctx1.program, args.width)
    vm2 = Vm(ctx2.program, args.width)
    est = tic_estimate(
        vm1, lambda: vm1.initial_state(args.entry),
        vm2, lambda: vm2.initial_state(args.entry),
        lambda: _attacker(args.attacker),
        args.max_steps, args.trials, args.seed,
    )
    payload = {
        "advantage": est.advantage,
        "ci": list(est.ci),
        "pair": list(est.pair),
        "trials": est.trials,
    }
    _emit(args, payload, [
        "advantage {:.4f}  ci [{:.4f}, {:.4f}]  pair {}".format(
            est.advantage, est.ci[0], est.ci[1], est.pair)
    ])
    return 0


def cmd_harmonize(args, cfg) -> int:
    ctx = _context(args.file, args, cfg)
    impl = ctx.impl()
    symops = {}
    from .crypto_api import FreshNonces, instantiate_symop
    from .concrete_vm import Obj, Num
    for e in ctx.libspec.method_entries:
        receiver = Obj(e.cid, {a[1]: Num(a[2] if a[0] == "eq" else 0) for a in e.predicate})
        symops[e.symop.name] = instantiate_symop(e.symop, receiver, args.width, FreshNonces())
    for opname, op in ctx.libspec.op_entries.items():
        symops["op:" + opname] = op
    reference = ImplLibrary(ctx.libspec, impl, symops)
    library = BitFlipLibrary(reference) if args.mutant else reference
    report = harmonize_check(library, ctx.libspec, impl, symops, args.samples, args.seed)
    payload = {
        "ok": report.ok,
        "checked": report.checked,
        "uncovered": report.uncovered,
        "counterexample": list(map(str, report.counterexample)) if report.counterexample else None,
    }
    text = ["harmonizes" if report.ok else "mismatch", "checked {}".format(report.checked)]
    if report.counterexample:
        text.append("counterexample: {}".format(report.counterexample))
    _emit(args, payload, text)
    return 0 if report.ok else 1


def make_parser(cfg: Config) -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="adl", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, needs_file=True):
        if needs_file:
            p.add_argument("file")
        p.add_argument("--width", type=int, default=cfg.width)
        p.add_argument("--seed", type=int, default=cfg.seed)
        p.add_argument("--max-steps", type=int, default=cfg.steps)
        p.add_argument("--entry", default="main")
        p.add_argument("--registry", default="")
        p.add_argument("--json", action="store_true")
        p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("check", help="validate and scan pre-compliance")
    common(p)
    p.set_defaults(fn=cmd_check)

    p = sub.add_parser("run", help="one concrete execution")
    common(p)
    p.add_argument("--attacker", default="")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("dist", help="output distribution")
    common(p)
    p.add_argument("--attacker", default="")
    p.add_argument("--exhaustive", action="store_true")
    p.add_argument("--trials", type=int, default=cfg.trials)
    p.set_defaults(fn=cmd_dist)

    p = sub.add_parser("symrun", help="enumerate symbolic views")
    common(p)
    p.add_argument("--budget", type=int, default=cfg.interactions)
    p.add_argument("--recipe-depth", type=int, default=cfg.recipe_depth)
    p.set_defaults(fn=cmd_symrun)

    p = sub.add_parser("embed", help="export the protocol tree")
    common(p)
    p.add_argument("--max-nodes", type=int, default=cfg.max_nodes)
    p.add_argument("--out", default="")
    p.set_defaults(fn=cmd_embed)

    p = sub.add_parser("equiv", help="bounded symbolic trace equivalence")
    p.add_argument("file_a")
    p.add_argument("file_b")
    common(p, needs_file=False)
    p.add_argument("--budget", type=int, default=cfg.interactions)
    p.add_argument("--recipe-depth", type=int, default=cfg.recipe_depth)
    p.set_defaults(fn=cmd_equiv)

    p = sub.add_parser("tv", help="tic advantage estimate")
    p.add_argument("file_a")
    p.add_argument("file_b")
    common(p, needs_file=False)
    p.add_argument("--attacker", default="builtin:echo-bit")
    p.add_argument("--trials", type=int, default=cfg.trials)
    p.set_defaults(fn=cmd_tv)

    p = sub.add_parser("harmonize", help="library vs implementation agreement")
    common(p)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--mutant", action="store_true")
    p.set_defaults(fn=cmd_harmonize)

    return ap


def main(argv=None) -> int:
    try:
        cfg = load_config()
    except (ValueError, OSError, json.JSONDecodeError) as e:
        print("bad ADL_CONFIG: {}".format(e), file=sys.stderr)
        return 2
    ap = make_parser(cfg)
    args = ap.parse_args(argv)
    try:
        return args.fn(args, cfg)
    except FileNotFoundError as e:
        print(str(e), file=sys.stderr)
        return 2
    except Exception as e:  # diagnostics, monitor failures, limits
        print("error: {}".format(e), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
