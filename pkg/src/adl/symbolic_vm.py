"""Symbolic ADL semantics: term-valued registers and heap cells, views,
library calls as symbolic-operation evaluation, adversary-decided
operations, and bounded view enumeration.

Operand classes drive the routing of unary/binary operations:

    D   concrete machine values          -> ordinary concrete rule
    Db  terms in range(iota)             -> library route (lifted destructor)
    Dc  other terms                      -> adversary route (out event, then
                                            any input deducible from the view)

Tests (if-test/if-testz) and cmp with any symbolic operand publish their
operands and branch adversarially.  Library-bound invoke-direct-range
evaluates the specified symbolic operation on the argument images and the
heap-slice image; its pair(result, heap') return value resumes execution.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

from . import ops
from .bytecode import INVOKE_KIND, Program
from .concrete_vm import (
    RES_LO,
    RES_UP,
    VOID,
    ConcreteState,
    Frame,
    LibCall,
    Loc,
    MalCall,
    Next,
    Num,
    Obj,
    RandChoice,
    Returned,
    Stuck,
    Vm,
    def_regs,
    freeze_heap,
    heap_slice,
)
from .crypto_api import FreshNonces, LibSpec, instantiate_symop, resolve
from .deduction import (
    ATTACKER_NONCE_POOL,
    InEvent,
    OutEvent,
    View,
    choice_set,
    out_terms,
)
from .encoding import heap_hat, heap_unhat, value_hat
from .terms import Op, SymbolicModel, Term, eval_op, in_iota_range, render, tag_constructor

FINAL_CALL = "finalCall"


@dataclass(frozen=True)
class Sym:
    term: Term

    def __repr__(self):
        return "Sym({})".format(render(self.term))


def value_class(v) -> str:
    if isinstance(v, Sym):
        return "Db" if in_iota_range(v.term) else "Dc"
    return "D"


class SymState:
    """Machine state over symbolic values plus the attacker-observable view.

    pending is None or ("value", dest) while the machine awaits an in event
    whose term lands in `dest` ("reg", r) or ("res",)."""

    __slots__ = ("cstate", "view", "pending", "fresh")

    def __init__(self, cstate: ConcreteState, view: View = (), pending=None,
                 fresh: int = 0):
        self.cstate = cstate
        self.view = view
        self.pending = pending
        self.fresh = fresh

    def copy(self) -> "SymState":
        return SymState(self.cstate.copy(), self.view, self.pending, self.fresh)


@dataclass(frozen=True)
class SymFinal:
    value: object
    heap: tuple
    view: View


@dataclass(frozen=True)
class SymStuck:
    rule: str
    reason: str
    view: View = ()


@dataclass
class SymSuccessor:
    state: object           # SymState | SymFinal | SymStuck
    route: str              # concrete | library | adversary | none
    events: tuple = ()      # view events appended in this step


def model_tags(program: Program) -> set:
    tags = {FINAL_CALL, "cmp"}
    tags.update(program.class_ids)
    tags.update(f for fs in program.fields.values() for f in fs)
    for kind in program.mal:
        tags.update(program.mal[kind])
    tags.update(ops.UNOP_NAMES)
    tags.update(ops.BINOP_NAMES)
    tags.update(ops.RELOP_NAMES)
    return tags


class SymVm:
    """Symbolic execution engine for one program/model/libspec triple."""

    def __init__(self, program: Program, width: int, model: SymbolicModel,
                 libspec: LibSpec):
        self.program = program
        self.width = width
        self.model = model
        self.libspec = libspec
        self.inner = Vm(program, width, lib_split=libspec.split_keys())

    def initial_state(self, entry: str = "main", args: Sequence = ()) -> SymState:
        return SymState(self.inner.initial_state(entry, args))

    # -- helpers -------------------------------------------------------------

    def _hat(self, v) -> Term:
        if isinstance(v, Sym):
            return v.term
        return value_hat(v, self.width)

    def _out(self, state: SymState, tag: str, payload: Sequence[Term]) -> tuple:
        ev = OutEvent(tuple(payload), tag)
        return state.view + (ev,), ev

    # -- the step relation ----------------------------------------------------

    def sym_step(self, state: SymState, choice=None) -> list:
        """Successors of a symbolic state.

        With pending set, `choice` must be an (term, recipe) pair whose
        recipe evaluates to the term over Out(view); otherwise the unique
        applicable rule fires, yielding one successor (deterministic and
        library routes), one pending successor (adversary value queries),
        or several (adversary-decided branches).
        """
        if state.pending is not None:
            return [self._resolve_choice(state, choice)]

        ins = self.inner.instr_at(state.cstate)
        fr = state.cstate.frame
        op = ins.op

        if op in ("unop", "binop"):
            regs = [ins.args[1]] if op == "unop" else [ins.args[1], ins.args[2]]
            vals = [fr.get(r) for r in regs]
            classes = [value_class(v) for v in vals]
            if all(c == "D" for c in classes):
                return [self._concrete(state)]
            if any(c == "Dc" for c in classes):
                opname = ins.args[2] if op == "unop" else ins.args[3]
                return [self._adv_value_query(state, opname, vals, ("reg", ins.args[0]))]
            return [self._library_op(state, ins)]
        if op == "cmp":
            vals = [fr.get(ins.args[1]), fr.get(ins.args[2])]
            if all(value_class(v) == "D" for v in vals):
                return [self._concrete(state)]
            return self._adv_branches(
                state, "cmp", vals,
                [("reg", ins.args[0], Num(n)) for n in (-1, 0, 1)],
            )
        if op in ("if-test", "if-testz"):
            regs = [ins.args[0], ins.args[1]] if op == "if-test" else [ins.args[0]]
            vals = [fr.get(r) for r in regs]
            if all(value_class(v) == "D" for v in vals):
                return [self._concrete(state)]
            rop = ins.args[3] if op == "if-test" else ins.args[2]
            off = ins.args[2] if op == "if-test" else ins.args[1]
            return self._adv_branches(
                state, rop, vals, [("pp", off), ("pp", 1)],
            )
        if op == "rand":
            return [SymSuccessor(
                SymStuck("Prob", "rand outside the crypto-API", state.view), "none",
            )]
        if op in INVOKE_KIND:
            return self._invoke(state, ins)
        return [self._concrete(state)]

    def _concrete(self, state: SymState) -> SymSuccessor:
        work = state.copy()
        marker = self.inner.micro_step(work.cstate)
        if isinstance(marker, Next):
            return SymSuccessor(work, "concrete")
        if isinstance(marker, Stuck):
            return SymSuccessor(SymStuck(marker.rule, marker.reason, state.view), "none")
        if isinstance(marker, Returned):
            view, _ = self._out(work, FINAL_CALL, [])
            return SymSuccessor(
                SymFinal(marker.value, freeze_heap(work.cstate.heap), view), "concrete",
                events=(view[-1],),
            )
        if isinstance(marker, RandChoice):
            return SymSuccessor(SymStuck("Prob", "rand outside the crypto-API", state.view), "none")
        if isinstance(marker, (MalCall, LibCall)):
            raise AssertionError("interactive marker on the concrete route")
        raise AssertionError(marker)

    def _library_op(self, state: SymState, ins) -> SymSuccessor:
        work = state.copy()
        fr = work.cstate.frame
        if ins.op == "unop":
            opname, dest, srcs = ins.args[2], ins.args[0], [ins.args[1]]
        else:
            opname, dest, srcs = ins.args[3], ins.args[0], [ins.args[1], ins.args[2]]
        args = [self._hat(fr.get(r)) for r in srcs]
        recipe = self.libspec.operator_op(opname)
        result = eval_op(self.model, recipe, args)
        if result is None:
            return SymSuccessor(
                SymStuck("Binop-l" if ins.op == "binop" else "Unop-l",
                         "operator {} undefined on operands".format(opname), state.view),
                "none",
            )
        fr.regs[dest] = Sym(result)
        fr.pp += 1
        return SymSuccessor(work, "library")

    def _adv_value_query(self, state: SymState, opname: str, vals, dest) -> SymSuccessor:
        work = state.copy()
        payload = [self._hat(v) for v in vals]
        work.view, ev = self._out(work, opname, payload)
        work.pending = ("value", dest)
        return SymSuccessor(work, "adversary", events=(ev,))

    def _adv_branches(self, state: SymState, opname: str, vals, outcomes) -> list:
        payload = [self._hat(v) for v in vals]
        succs = []
        for outcome in outcomes:
            work = state.copy()
            work.view, ev = self._out(work, opname, payload)
            fr = work.cstate.frame
            if outcome[0] == "pp":
                fr.pp += outcome[1]
            else:
                fr.regs[outcome[1]] = outcome[2]
                fr.pp += 1
            succs.append(SymSuccessor(work, "adversary", events=(ev,)))
        return succs

    def _resolve_choice(self, state: SymState, choice) -> SymSuccessor:
        if choice is None:
            raise ValueError("pending state needs an adversary choice")
        term, recipe = choice
        got = eval_op(self.model, recipe, out_terms(state.view))
        if got != term:
            raise ValueError(
                "invalid choice: recipe yields {}, not {}".format(
                    "bot" if got is None else render(got), render(term))
            )
        work = state.copy()
        work.view = work.view + (InEvent(term, recipe),)
        work.pending = None
        fr = work.cstate.frame
        _kind, dest = state.pending
        if dest[0] == "reg":
            fr.regs[dest[1]] = Sym(term)
        else:
            fr.regs[RES_LO] = Sym(term)
            fr.regs[RES_UP] = VOID
        fr.pp += 1
        return SymSuccessor(work, "adversary", events=(work.view[-1],))

    def _invoke(self, state: SymState, ins) -> list:
        mid = ins.args[-1]
        fr = state.cstate.frame
        mal_kind = self.program.mal_kind_of(mid)
        if mal_kind is not None:
            if ins.op.endswith("-range"):
                observed = [fr.get(ins.args[0] + i) for i in range(ins.args[1])]
            else:
                observed = [fr.get(r) for r in ins.args[:5]]
            return [self._adv_value_query(state, mid, observed, ("res",))]
        if ins.op == "invoke-direct-range":
            vk, n = ins.args[0], ins.args[1]
            recv = fr.get(vk)
            if isinstance(recv, Loc) and recv.loc in state.cstate.heap:
                obj = state.cstate.heap[recv.loc]
                if isinstance(obj, Obj):
                    entry = resolve(self.libspec, mid, obj)
                    if entry is not None:
                        return [self._lib_call(state, entry, vk, n, recv.loc)]
        return [self._concrete(state)]

    def _lib_call(self, state: SymState, entry, vk: int, n: int, recv_loc: int) -> SymSuccessor:
        work = state.copy()
        fr = work.cstate.frame
        args = [fr.get(vk + i) for i in range(n)]
        sl = heap_slice(work.cstate.heap, recv_loc)
        inputs = [self._hat(a) for a in args] + [heap_hat(sl, self.width)]
        fresh = FreshNonces()
        fresh.counter = work.fresh
        ground = instantiate_symop(entry.symop, work.cstate.heap[recv_loc], self.width, fresh)
        work.fresh = fresh.counter
        result = eval_op(self.model, ground, inputs)
        if result is None:
            return SymSuccessor(
                SymStuck("rIDR-s", "library operation {} evaluated to bottom at {}".format(
                    entry.symop.name, entry.mid), state.view),
                "none",
            )
        if result.head != "pair" or len(result.args) != 2:
            return SymSuccessor(
                SymStuck("rIDR-s", "library operation must yield pair(result, heap)", state.view),
                "none",
            )
        t, hprime = result.args
        new_slice = heap_unhat(hprime, self.width)
        if new_slice is None:
            return SymSuccessor(
                SymStuck("rIDR-s", "returned heap term is malformed", state.view), "none",
            )
        for loc, cell in new_slice.items():
            work.cstate.heap[loc] = _symify_cell(cell)
        fr.regs[RES_LO] = Sym(t)
        fr.regs[RES_UP] = VOID
        fr.pp += 1
        return SymSuccessor(work, "library")


def _symify_cell(cell):
    if isinstance(cell, Obj):
        return Obj(cell.cls, {f: _symify(v) for f, v in cell.fields.items()})
    return type(cell)(cell.length, {i: _symify(v) for i, v in cell.cells.items()})


def _symify(v):
    return Sym(v) if isinstance(v, Term) else v


# ---------------------------------------------------------------------------
# View enumeration and strategy replay
# ---------------------------------------------------------------------------


class EnumerationLimit(RuntimeError):
    pass


def enumerate_views(
    vm: SymVm,
    s0: SymState,
    interaction_budget: int,
    recipe_depth: int,
    choice_depth: Optional[int] = None,
    nonce_pool=ATTACKER_NONCE_POOL,
    max_views: int = 100_000,
    max_choices: int = 64,
) -> set:
    """All views reachable within the interaction budget: adversary inputs
    range over the capped deducible choice set (default depth: recipe depth
    capped at 1) plus the attacker-nonce pool; both branches of every
    adversary-decided test are explored.  Views of stuck executions carry
    their prefix; exceeding the view limit raises."""
    if choice_depth is None:
        choice_depth = min(recipe_depth, 1)
    views: set = set()
    stack = [(s0.copy(), interaction_budget)]
    while stack:
        state, budget = stack.pop()
        if isinstance(state, (SymFinal, SymStuck)):
            views.add(state.view)
            _check(views, max_views)
            continue
        if state.pending is not None:
            # The out half of this interaction was already charged.
            for term, recipe in choice_set(vm.model, out_terms(state.view),
                                           choice_depth, nonce_pool, max_choices):
                succ = vm.sym_step(state, (term, recipe))[0]
                stack.append((succ.state, budget))
            continue
        succs = vm.sym_step(state)
        out_emitting = any(s.events for s in succs)
        if out_emitting and budget <= 0:
            views.add(state.view)
            _check(views, max_views)
            continue
        for succ in succs:
            nb = budget - 1 if succ.events and not _is_final_event(succ) else budget
            stack.append((succ.state, nb))
    return views


def _is_final_event(succ: SymSuccessor) -> bool:
    return isinstance(succ.state, SymFinal)


def _check(views, max_views):
    if len(views) > max_views:
        raise EnumerationLimit("view enumeration exceeded {}".format(max_views))


def run_strategy(vm: SymVm, s0: SymState, moves: Sequence) -> object:
    """Deterministic replay: moves are ("in", recipe) for pending inputs and
    ("branch", index) for adversary-decided branch points.  Returns the
    terminal SymFinal/SymStuck (or the reached SymState if moves run out).
    """
    state = s0.copy()
    queue = list(moves)
    while True:
        if isinstance(state, (SymFinal, SymStuck)):
            return state
        if state.pending is not None:
            if not queue:
                return state
            kind, recipe = queue.pop(0)
            if kind != "in":
                raise ValueError("pending state needs an in move")
            term = eval_op(vm.model, recipe, out_terms(state.view))
            if term is None:
                raise ValueError("strategy recipe evaluates to bottom")
            state = vm.sym_step(state, (term, recipe))[0].state
            continue
        succs = vm.sym_step(state)
        if len(succs) == 1:
            state = succs[0].state
            continue
        if not queue:
            return state
        kind, idx = queue.pop(0)
        if kind != "branch":
            raise ValueError("branch point needs a branch move")
        state = succs[idx].state
