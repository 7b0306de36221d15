"""Probabilistic transition systems, three-way split-state composition with
an activity token, and the split-state representation of ADL programs.

Labels are tuples whose first element names the kind:

    ("lc", mid, args, slice)   honest -> library call
    ("lr", payload)            library -> honest response
    ("out", name, args)        honest -> attacker (name "finalCall" at
                               program finality, with no arguments)
    ("in", value)              attacker -> honest response
    ("final", token)           attacker output, ends the run

Every label carries cost 1; a synchronized transition costs the sum of
both sides.  Only the active component steps; sending a synchronizing
label hands the activity token to the receiver.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Optional, Sequence

from .bytecode import Program, static_rand_scan
from .concrete_vm import (
    RES_LO,
    RES_UP,
    VOID,
    Arr,
    AttackerHook,
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
    Rng,
    Stuck,
    Vm,
    def_regs,
    freeze_heap,
    heap_slice,
    outcome_key,
    render_value,
)
from . import ops

HONEST, ATTACKER, LIBRARY = "honest", "attacker", "library"

_RECEIVER = {"out": ATTACKER, "in": HONEST, "lc": LIBRARY, "lr": HONEST}

ALLOWED_KINDS = {
    HONEST: {"out", "in", "lc", "lr"},
    ATTACKER: {"out", "in", "final"},
    LIBRARY: {"lc", "lr"},
}


class Pts:
    """Component interface for the split-state composition.

    classify(s) returns ("prob", [(s', cost, probability)]) for
    probabilistic states or ("nondet", [(label, s', cost)]) otherwise; an
    empty nondeterministic set marks a final/terminal component state.
    receive(s, label) is consulted on inactive components and returns
    (s', cost) when the component synchronizes on the label.
    """

    kinds: frozenset = frozenset()

    def initial(self):
        raise NotImplementedError

    def classify(self, state):
        raise NotImplementedError

    def receive(self, state, label):
        return None

    def outcome(self, state):
        return None


class CompositionError(ValueError):
    pass


class MonitoredFailure(RuntimeError):
    """A dynamic pre-compliance monitor fired; names the violated clause."""

    def __init__(self, clause: str):
        super().__init__(clause)
        self.clause = clause


@dataclass(frozen=True)
class ComposedState:
    honest: tuple    # (active, state)
    attacker: tuple
    library: tuple
    finished: Optional[str] = None  # final token once emitted

    def parts(self):
        return {HONEST: self.honest, ATTACKER: self.attacker, LIBRARY: self.library}


class ComposedPts:
    """Split-state composition of honest, attacker, and library components."""

    def __init__(self, honest: Pts, attacker: Pts, library: Pts):
        for comp, who in ((honest, HONEST), (attacker, ATTACKER), (library, LIBRARY)):
            extra = set(comp.kinds) - ALLOWED_KINDS[who]
            if extra:
                raise CompositionError(
                    "{} component uses labels outside its universe: {}".format(who, sorted(extra))
                )
        self.components = {HONEST: honest, ATTACKER: attacker, LIBRARY: library}

    def initial(self) -> ComposedState:
        return ComposedState(
            (True, self.components[HONEST].initial()),
            (False, self.components[ATTACKER].initial()),
            (False, self.components[LIBRARY].initial()),
        )

    def active_component(self, cs: ComposedState) -> Optional[str]:
        names = [w for w, (b, _s) in cs.parts().items() if b]
        if len(names) > 1:
            raise CompositionError("more than one active component")
        return names[0] if names else None

    def _replace(self, cs: ComposedState, who: str, part: tuple, finished=None) -> ComposedState:
        d = cs.parts()
        d[who] = part
        return ComposedState(d[HONEST], d[ATTACKER], d[LIBRARY], finished or cs.finished)

    def classify(self, cs: ComposedState):
        """Composed transitions: probabilistic steps of the active component
        alone, or synchronized hand-offs on shared labels."""
        if cs.finished is not None:
            return ("nondet", [])
        who = self.active_component(cs)
        if who is None:
            return ("nondet", [])
        comp = self.components[who]
        _b, s = cs.parts()[who]
        kind, trans = comp.classify(s)
        if kind == "prob":
            out = [
                (self._replace(cs, who, (True, s2)), cost, p)
                for (s2, cost, p) in trans
            ]
            return ("prob", out)
        moves = []
        for (label, s2, cost) in trans:
            lkind = label[0]
            if lkind == "final":
                nxt = self._replace(cs, who, (False, s2), finished=label[1])
                moves.append((label, nxt, cost))
                continue
            receiver = _RECEIVER[lkind]
            if receiver == who:
                raise CompositionError("component {} cannot receive its own {}".format(who, lkind))
            rb, rs = cs.parts()[receiver]
            if rb:
                continue
            got = self.components[receiver].receive(rs, label)
            if got is None:
                continue
            rs2, rcost = got
            nxt = self._replace(cs, who, (False, s2))
            nxt = self._replace(nxt, receiver, (True, rs2))
            moves.append((label, nxt, cost + rcost))
        return ("nondet", moves)

    def outcome(self, cs: ComposedState):
        if cs.finished is not None:
            return ("advout", cs.finished)
        for who in (HONEST, LIBRARY):
            o = self.components[who].outcome(cs.parts()[who][1])
            if o is not None:
                return o
        return ("stuck", "composition")


def compose3(honest: Pts, attacker: Pts, library: Pts) -> ComposedPts:
    return ComposedPts(honest, attacker, library)


def project_trace(trace: Sequence[tuple], kinds: Iterable[str]) -> list:
    """Subsequence of labels whose kind is in the set, order preserved."""
    ks = set(kinds)
    return [l for l in trace if l and l[0] in ks]


# ---------------------------------------------------------------------------
# ADL components
# ---------------------------------------------------------------------------


def _freeze_slice(slice_heap: dict) -> tuple:
    return freeze_heap(slice_heap)


def _thaw_heap(frozen: tuple) -> dict:
    heap = {}
    for entry in frozen:
        if entry[1] == "obj":
            heap[entry[0]] = Obj(entry[2], dict(entry[3]))
        else:
            heap[entry[0]] = Arr(entry[2], dict(entry[3]))
    return heap


class AdlHonestPts(Pts):
    """Honest-program semantics: the concrete rules minus the probabilistic
    rule and minus library-internal execution.  Library-bound calls emit
    lc and resume on lr (result registers written, heap overwritten with
    the renamed returned slice); malicious calls emit out and resume on in;
    finality emits out(finalCall) once."""

    kinds = frozenset({"out", "in", "lc", "lr"})

    def __init__(self, program: Program, width: int, split_keys: Iterable[tuple],
                 entry: str = "main", args: Sequence = ()):
        self.vm = Vm(program, width, lib_split=split_keys)
        self.entry = entry
        self.args = tuple(args)

    def initial(self):
        return ("run", self.vm.initial_state(self.entry, self.args))

    def classify(self, state):
        phase = state[0]
        if phase in ("await_in", "await_lr", "done", "failed"):
            return ("nondet", [])
        cstate: ConcreteState = state[1]
        work = cstate.copy()
        marker = self.vm.micro_step(work)
        if isinstance(marker, Next):
            return ("prob", [(("run", work), marker.cost, Fraction(1))])
        if isinstance(marker, RandChoice):
            raise MonitoredFailure("make use of the rand-instruction")
        if isinstance(marker, MalCall):
            label = ("out", marker.mid, tuple(marker.args))
            return ("nondet", [(label, ("await_in", work), 1)])
        if isinstance(marker, LibCall):
            sl = heap_slice(work.heap, marker.receiver)
            label = ("lc", marker.mid, tuple(marker.args), _freeze_slice(sl))
            return ("nondet", [(label, ("await_lr", work, frozenset(sl)), 1)])
        if isinstance(marker, Returned):
            final = ("done", ("value", render_value(marker.value), freeze_heap(work.heap)))
            return ("nondet", [(("out", "finalCall"), final, 1)])
        if isinstance(marker, Stuck):
            return ("nondet", [])  # stuck: terminal
        raise AssertionError(marker)

    def receive(self, state, label):
        if state[0] == "await_in" and label[0] == "in":
            cstate = state[1].copy()
            self.vm.apply_adv_resp(cstate, label[1])
            return ("run", cstate), 1
        if state[0] == "await_lr" and label[0] == "lr":
            cstate = state[1].copy()
            slice_locs = state[2]
            lo, up, frozen_lib_heap, alloc_order = label[1]
            lib_heap = _thaw_heap(frozen_lib_heap)
            lo, up, lib_heap = self._rename(cstate.heap, slice_locs, lib_heap, alloc_order, lo, up)
            cstate.heap.update(lib_heap)  # h[h']: the response overwrites
            fr = cstate.frame
            fr.regs[RES_LO] = lo
            fr.regs[RES_UP] = up
            fr.pp += 1
            return ("run", cstate), 1
        return None

    def _rename(self, honest_heap, slice_locs, lib_heap, alloc_order, lo, up):
        # Locations the library allocated get fresh honest-side locations,
        # assigned in allocation order (deterministic; reproduces the
        # monolithic allocator, which is "smallest unused").
        mapping = {}
        used = set(honest_heap)
        for l in alloc_order:
            fresh = 0
            while fresh in used:
                fresh += 1
            mapping[l] = fresh
            used.add(fresh)

        def rv(v):
            if isinstance(v, Loc) and v.loc in mapping:
                return Loc(mapping[v.loc])
            return v

        out_heap = {}
        for l, cell in lib_heap.items():
            nl = mapping.get(l, l)
            if isinstance(cell, Obj):
                out_heap[nl] = Obj(cell.cls, {f: rv(x) for f, x in cell.fields.items()})
            else:
                out_heap[nl] = Arr(cell.length, {i: rv(x) for i, x in cell.cells.items()})
        return rv(lo), rv(up), out_heap

    def outcome(self, state):
        if state[0] == "done":
            return state[1]
        if state[0] == "failed":
            return ("stuck", state[1])
        if state[0] == "run":
            work = state[1].copy()
            marker = self.vm.micro_step(work)
            if isinstance(marker, Stuck):
                return ("stuck", marker.rule)
        return None


class AdlLibraryPts(Pts):
    """Crypto-API semantics: the concrete rules plus the probabilistic rule,
    minus the final-return rules.  Activated by lc with the callee frame and
    the receiver's heap slice; answers lr with (lo, up, final heap, alloc
    order).  Dynamic monitors enforce pre-compliance: no adversary calls,
    and no access outside the slice closure."""

    kinds = frozenset({"lc", "lr"})

    def __init__(self, program: Program, width: int, split_keys: Iterable[tuple]):
        self.vm = Vm(program, width)  # plain dispatch inside the library
        self.split_keys = set(split_keys)
        self.program = program

    def initial(self):
        return ("idle",)

    def receive(self, state, label):
        if state[0] != "idle" or label[0] != "lc":
            return None
        _kind, mid, args, frozen_slice = label
        heap = _thaw_heap(frozen_slice)
        recv = args[0]
        if not isinstance(recv, Loc) or recv.loc not in heap:
            return None
        cls = heap[recv.loc].cls
        label_name = self.program.lookup_direct.get((mid, cls))
        if label_name is None:
            return None
        cstate = ConcreteState([Frame(label_name, 0, def_regs(args))], heap)
        return ("run", cstate, ()), 1

    def classify(self, state):
        if state[0] != "run":
            return ("nondet", [])
        cstate, alloc_order = state[1], state[2]
        work = cstate.copy()
        before = set(work.heap)
        marker = self.vm.micro_step(work)
        allocs = alloc_order + tuple(sorted(set(work.heap) - before))
        if isinstance(marker, Next):
            return ("prob", [(("run", work, allocs), marker.cost, Fraction(1))])
        if isinstance(marker, RandChoice):
            space = 1 << self.vm.width
            moves = []
            for n in range(space):
                branch = work.copy()
                self.vm.apply_rand(branch, marker.reg, ops.wrap(n, self.vm.width))
                moves.append((("run", branch, allocs), 1, Fraction(1, space)))
            return ("prob", moves)
        if isinstance(marker, MalCall):
            raise MonitoredFailure("never invokes the adversary")
        if isinstance(marker, Returned):
            payload = (marker.value, VOID, freeze_heap(work.heap), allocs)
            return ("nondet", [(("lr", payload), ("idle",), 1)])
        if isinstance(marker, Stuck):
            if "location" in marker.reason:
                raise MonitoredFailure("reads the slice of the heap")
            return ("nondet", [])
        raise AssertionError(marker)


class AdlAttackerPts(Pts):
    """Attacker semantics: the external hook lifted to a transition system.
    Internal steps surface as cost-1 probabilistic (Dirac) transitions so
    composed step counts reflect the hook's declared costs."""

    kinds = frozenset({"out", "in", "final"})

    def __init__(self, hook: AttackerHook, rng: Optional[Rng] = None):
        self.hook = hook
        self.rng = rng

    def initial(self):
        return ("idle", self.hook.start_state())

    def receive(self, state, label):
        if state[0] != "idle" or label[0] != "out":
            return None
        as_ = state[1]
        if label[1] == "finalCall":
            inp = ()
        else:
            inp = (label[1],) + tuple(label[2])
        new_as, k, reply = self.hook.respond(as_, inp, self.rng)
        if reply is None:
            return ("stopped", as_), 1
        return ("emitting", new_as, k, reply), 1

    def classify(self, state):
        if state[0] != "emitting":
            return ("nondet", [])
        _p, as_, k, reply = state
        if k > 0:
            return ("prob", [(("emitting", as_, k - 1, reply), 1, Fraction(1))])
        kind, payload = reply
        if kind == "resp":
            return ("nondet", [(("in", payload), ("idle", as_), 1)])
        return ("nondet", [(("final", payload), ("stopped", as_), 1)])


# ---------------------------------------------------------------------------
# adl_split and execution
# ---------------------------------------------------------------------------


def adl_split(
    program: Program,
    width: int,
    split_keys: Iterable[tuple],
    attacker: AttackerHook,
    entry: str = "main",
    args: Sequence = (),
    rng: Optional[Rng] = None,
) -> ComposedPts:
    """The split-state representation of a pre-compliant program: honest /
    attacker / library composition.  Static pre-compliance (rand placement)
    is checked here; clauses (i) and (ii) are enforced by runtime monitors.
    """
    diags = static_rand_scan(program, entry)
    if diags:
        raise MonitoredFailure("; ".join(str(d) for d in diags))
    return compose3(
        AdlHonestPts(program, width, split_keys, entry, args),
        AdlAttackerPts(attacker, rng),
        AdlLibraryPts(program, width, split_keys),
    )


def downarrow(
    t: ComposedPts,
    n: int,
    mode: str = "exact",
    trials: int = 10_000,
    seed: int = 0,
    branch_limit: int = 1_000_000,
) -> dict:
    """Pr[T terminates within n steps with outcome x], per outcome.

    Exact mode enumerates probabilistic branching with rational weights
    (nondeterministic states must be deterministic); Monte-Carlo mode
    samples with per-trial seeds seed + index."""
    if mode == "exact":
        dist: dict = {}
        budget = [branch_limit]

        def explore(cs, prob: Fraction, steps: int):
            budget[0] -= 1
            if budget[0] < 0:
                raise CompositionError("exact enumeration exceeded branch limit")
            while True:
                if steps > n:
                    _acc(dist, ("timeout",), prob)
                    return
                kind, trans = t.classify(cs)
                if kind == "prob":
                    if len(trans) == 1:
                        cs2, cost, p = trans[0]
                        assert p == 1
                        cs, steps = cs2, steps + cost
                        continue
                    for cs2, cost, p in trans:
                        explore(cs2, prob * p, steps + cost)
                    return
                if not trans:
                    _acc(dist, t.outcome(cs), prob)
                    return
                if len(trans) > 1:
                    raise CompositionError("nondeterministic composed state in exact mode")
                label, cs2, cost = trans[0]
                steps += cost
                if label[0] == "final":
                    _acc(dist, ("advout", label[1]) if steps <= n else ("timeout",), prob)
                    return
                cs = cs2

        explore(t.initial(), Fraction(1), 0)
        return dist

    if mode == "montecarlo":
        counts: dict = {}
        for i in range(trials):
            outcome, _trace, _steps = sample_run(t, n, Rng(seed + i))
            counts[outcome] = counts.get(outcome, 0) + 1
        return {k: Fraction(v, trials) for k, v in counts.items()}

    raise CompositionError("unknown mode {!r}".format(mode))


def sample_run(t: ComposedPts, max_steps: int, rng: Rng):
    """One sampled composed execution; returns (outcome, labeled trace,
    total steps).  Trace entries are (component, label, cost)."""
    cs = t.initial()
    steps = 0
    trace = []
    while True:
        if steps > max_steps:
            return ("timeout",), tuple(trace), steps
        who = t.active_component(cs)
        kind, trans = t.classify(cs)
        if kind == "prob":
            if len(trans) == 1:
                cs, cost, _p = trans[0][0], trans[0][1], trans[0][2]
                steps += cost
                continue
            # Non-Dirac branching only arises from rand, which is uniform.
            idx = rng.randrange(len(trans))
            cs2, cost, _p = trans[idx]
            cs, steps = cs2, steps + cost
            continue
        if not trans:
            return t.outcome(cs), tuple(trace), steps
        if len(trans) > 1:
            raise CompositionError("nondeterministic composed state while sampling")
        label, cs2, cost = trans[0]
        steps += cost
        trace.append((who, label, cost))
        if label[0] == "final":
            if steps > max_steps:
                return ("timeout",), tuple(trace), steps
            return ("advout", label[1]), tuple(trace), steps
        cs = cs2


def _acc(dist: dict, key, prob: Fraction) -> None:
    dist[key] = dist.get(key, Fraction(0)) + prob


def composed_trace_json(trace: Sequence[tuple]) -> list:
    """Composed traces as JSON-ready dicts with component attribution."""
    out = []
    for who, label, cost in trace:
        out.append({"component": who, "label": [_json_safe(x) for x in label], "cost": cost})
    return out


def _json_safe(x):
    if isinstance(x, (str, int, bool)) or x is None:
        return x
    if isinstance(x, (tuple, list)):
        return [_json_safe(v) for v in x]
    return repr(x)
