"""Concrete ADL semantics as a probabilistic transition system.

Values are w-bit signed numbers, heap locations, and void.  Every ordinary
rule costs one step; rand is the only probabilistic rule (uniform over the
w-bit range); malicious invocations drive an external attacker whose reply
either resumes execution (cost: attacker steps + 2) or ends it with an
adversarial output (cost: attacker steps + 1).  A final return with a
one-deep frame yields a value final state, after which the attacker is
consulted once more (cost: attacker steps + 2) if it chooses to finish.

The VM exposes micro-steps that stop at probabilistic and interactive
points so that drivers (run, exhaustive enumeration, split-state
composition) can resolve them; micro-steps mutate the state in place,
drivers copy at branch points.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Optional, Sequence

from . import ops
from .bytecode import INVOKE_KIND, Instr, Program


# ---------------------------------------------------------------------------
# Values, heap, states
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Num:
    value: int

    def __repr__(self):
        return "Num({})".format(self.value)


@dataclass(frozen=True)
class Loc:
    loc: int

    def __repr__(self):
        return "Loc({})".format(self.loc)


@dataclass(frozen=True)
class Void:
    def __repr__(self):
        return "Void"


VOID = Void()


def render_value(v) -> str:
    if isinstance(v, Num):
        return str(v.value)
    if isinstance(v, Loc):
        return "loc:{}".format(v.loc)
    if isinstance(v, Void):
        return "void"
    return repr(v)


def parse_value(tok: str):
    if tok == "void":
        return VOID
    if tok.startswith("loc:"):
        return Loc(int(tok[4:]))
    return Num(int(tok))


class Obj:
    __slots__ = ("cls", "fields")

    def __init__(self, cls: str, fields: dict):
        self.cls = cls
        self.fields = fields

    def copy(self) -> "Obj":
        return Obj(self.cls, dict(self.fields))

    def __eq__(self, other):
        return isinstance(other, Obj) and self.cls == other.cls and self.fields == other.fields

    def __repr__(self):
        return "Obj({}, {})".format(self.cls, self.fields)


class Arr:
    __slots__ = ("length", "cells")

    def __init__(self, length: int, cells: dict):
        self.length = length
        self.cells = cells

    def copy(self) -> "Arr":
        return Arr(self.length, dict(self.cells))

    def __eq__(self, other):
        return isinstance(other, Arr) and self.length == other.length and self.cells == other.cells

    def __repr__(self):
        return "Arr({}, {})".format(self.length, self.cells)


def default_object(program: Program, cls: str) -> Obj:
    return Obj(cls, {f: Num(0) for f in program.fields.get(cls, ())})


def default_array(n: int) -> Arr:
    return Arr(n, {i: Num(0) for i in range(n)})


RES_LO = "res_lo"
RES_UP = "res_up"


class Frame:
    __slots__ = ("label", "pp", "regs")

    def __init__(self, label: str, pp: int, regs: dict):
        self.label = label
        self.pp = pp
        self.regs = regs

    def get(self, r):
        return self.regs.get(r, VOID)

    def copy(self) -> "Frame":
        return Frame(self.label, self.pp, dict(self.regs))

    def __eq__(self, other):
        return (
            isinstance(other, Frame)
            and self.label == other.label
            and self.pp == other.pp
            and {k: v for k, v in self.regs.items() if not isinstance(v, Void)}
            == {k: v for k, v in other.regs.items() if not isinstance(v, Void)}
        )


def def_regs(args: Sequence) -> dict:
    """defReg: v_i holds the i-th argument, everything else void."""
    return {i: v for i, v in enumerate(args)}


class ConcreteState:
    __slots__ = ("frames", "heap", "attacker_state")

    def __init__(self, frames: list, heap: dict, attacker_state=None):
        self.frames = frames
        self.heap = heap
        self.attacker_state = attacker_state

    @property
    def frame(self) -> Frame:
        return self.frames[-1]

    def copy(self) -> "ConcreteState":
        return ConcreteState(
            [f.copy() for f in self.frames],
            {l: o.copy() for l, o in self.heap.items()},
            self.attacker_state,
        )

    def next_free_location(self) -> int:
        l = 0
        while l in self.heap:
            l += 1
        return l


def freeze_heap(heap: dict) -> tuple:
    out = []
    for l in sorted(heap):
        o = heap[l]
        if isinstance(o, Obj):
            out.append((l, "obj", o.cls, tuple(sorted(o.fields.items()))))
        else:
            out.append((l, "arr", o.length, tuple(sorted(o.cells.items()))))
    return tuple(out)


@dataclass(frozen=True)
class ValueFinal:
    value: object
    heap: tuple  # frozen heap
    attacker_state: object = None


@dataclass(frozen=True)
class AdvOut:
    token: str


@dataclass(frozen=True)
class Stuck:
    rule: str
    reason: str


@dataclass(frozen=True)
class Timeout:
    pass


# ---------------------------------------------------------------------------
# Attackers
# ---------------------------------------------------------------------------


class AttackerHook:
    """Driven step-by-step on malicious invocations.  respond() maps the
    attacker state and the observed input tuple to (new state, internal
    step count, reply); the reply is ("resp", value) to resume, ("final",
    token) to end with an adversarial output, or None to decline (only
    meaningful at the final hand-off)."""

    def start_state(self):
        return None

    def respond(self, state, inp, rng=None):
        raise NotImplementedError


class NullAttacker(AttackerHook):
    """Never finishes; any malicious invocation is answered with void."""

    def respond(self, state, inp, rng=None):
        if inp == ():
            return state, 0, None
        return state, 1, ("resp", VOID)


class ScriptedAttacker(AttackerHook):
    """Replays a transcript of responses; state is the script position.

    Transcript lines: `resp <value> cost <k>` or `final <token> cost <k>`.
    """

    def __init__(self, entries: Sequence[tuple]):
        self.entries = tuple(entries)  # ("resp", value, cost) | ("final", tok, cost)

    @classmethod
    def from_text(cls, text: str) -> "ScriptedAttacker":
        entries = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            toks = line.split()
            if len(toks) != 4 or toks[2] != "cost":
                raise ValueError("line {}: expected '<resp|final> <value> cost <k>'".format(lineno))
            kind, val, cost = toks[0], toks[1], int(toks[3])
            if kind == "resp":
                entries.append(("resp", parse_value(val), cost))
            elif kind == "final":
                entries.append(("final", val, cost))
            else:
                raise ValueError("line {}: unknown entry {!r}".format(lineno, kind))
        return cls(entries)

    def start_state(self):
        return 0

    def respond(self, state, inp, rng=None):
        if state >= len(self.entries):
            return state, 0, None
        kind, val, cost = self.entries[state]
        if inp == () and kind != "final":
            return state, 0, None
        return state + 1, cost, (kind, val)


class EchoBitAttacker(AttackerHook):
    """On the first invocation, finishes with the low bit of the first
    numeric argument; used by distinguishing experiments."""

    def respond(self, state, inp, rng=None):
        if inp == ():
            return state, 1, ("final", "0")
        for v in inp[1:]:
            if isinstance(v, Num):
                return state, 1, ("final", str(v.value & 1))
        return state, 1, ("final", "0")


class ConstAttacker(AttackerHook):
    def __init__(self, token: str):
        self.token = token

    def respond(self, state, inp, rng=None):
        return state, 1, ("final", self.token)


# ---------------------------------------------------------------------------
# Deterministic randomness
# ---------------------------------------------------------------------------


class Rng:
    """Seeded deterministic stream of uniform w-bit draws."""

    def __init__(self, seed: int):
        self.seed = seed
        self._r = random.Random(seed)

    def draw(self, width: int) -> int:
        return ops.wrap(self._r.getrandbits(width), width)

    def randrange(self, n: int) -> int:
        return self._r.randrange(n)


# ---------------------------------------------------------------------------
# Micro-step results
# ---------------------------------------------------------------------------


@dataclass
class Next:
    rule: str
    cost: int = 1


@dataclass
class RandChoice:
    reg: int


@dataclass
class MalCall:
    kind: str
    mid: str
    args: tuple


@dataclass
class LibCall:
    mid: str
    cls: str
    label: str
    receiver: int  # location id
    args: tuple


@dataclass
class Returned:
    value: object


class VmError(ValueError):
    pass


class Vm:
    """Instruction dispatch for one ADL program at a fixed register width.

    `lib_split` is the set of (mid, class) pairs cut out as crypto-API
    calls; monolithic execution leaves it empty so invoke-direct-range
    dispatches inline.
    """

    def __init__(self, program: Program, width: int = 64, lib_split: Iterable[tuple] = ()):
        if not (2 <= width <= 64):
            raise VmError("width must be in [2, 64]")
        self.program = program
        self.width = width
        self.lib_split = set(lib_split)
        self._name_refs: dict[str, int] = {}

    # -- initial configurations --------------------------------------------

    def initial_heap(self) -> dict:
        """Statics objects and string/class constants at the lowest
        locations, in sorted name order."""
        heap: dict = {}
        self._name_refs = {}
        loc = 0
        for cls in sorted(c for c in self.program.class_ids if self.program.fields.get(c)):
            heap[loc] = default_object(self.program, cls)
            for f in self.program.fields[cls]:
                self._name_refs["{}.{}".format(cls, f)] = loc
            loc += 1
        for s in sorted(self.program.string_consts):
            heap[loc] = Obj("_Str", {})
            self._name_refs["str:" + s] = loc
            loc += 1
        for cls in sorted(self.program.class_ids):
            heap[loc] = Obj("_Cls", {})
            self._name_refs["cls:" + cls] = loc
            loc += 1
        return heap

    def initial_state(self, entry: str = "main", args: Sequence = (), attacker_state=None) -> ConcreteState:
        if entry not in self.program.methods:
            raise VmError("no method {!r}".format(entry))
        heap = self.initial_heap()
        return ConcreteState([Frame(entry, 0, def_regs(args))], heap, attacker_state)

    def name_ref(self, name: str) -> Optional[int]:
        return self._name_refs.get(name)

    # -- helpers -------------------------------------------------------------

    def _num(self, v, rule: str) -> int:
        if not isinstance(v, Num):
            raise _StuckSignal(rule, "expected a number, got {}".format(render_value(v)))
        return v.value

    def _loc(self, state: ConcreteState, v, rule: str):
        if not isinstance(v, Loc) or v.loc not in state.heap:
            raise _StuckSignal(rule, "expected an allocated location, got {}".format(render_value(v)))
        return state.heap[v.loc], v.loc

    def instr_at(self, state: ConcreteState) -> Instr:
        fr = state.frame
        method = self.program.methods[fr.label]
        if not (0 <= fr.pp < len(method)):
            raise _StuckSignal("fetch", "program counter out of method")
        return method[fr.pp]

    # -- the execution relation ----------------------------------------------

    def micro_step(self, state: ConcreteState):
        """Apply the unique applicable rule, mutating `state`.  Returns a
        Next/RandChoice/MalCall/LibCall/Returned marker, or Stuck."""
        try:
            return self._dispatch(state)
        except _StuckSignal as sig:
            return Stuck(sig.rule, sig.reason)

    def _dispatch(self, state: ConcreteState):
        ins = self.instr_at(state)
        fr = state.frame
        op = ins.op
        w = self.width

        if op == "const":
            fr.regs[ins.args[0]] = Num(ops.wrap(ins.args[1], w))
            fr.pp += 1
            return Next("rConst")
        if op == "move":
            fr.regs[ins.args[0]] = fr.get(ins.args[1])
            fr.pp += 1
            return Next("rMove")
        if op == "unop":
            a = self._num(fr.get(ins.args[1]), "rUnop")
            fr.regs[ins.args[0]] = Num(ops.apply_unop(ins.args[2], a, w))
            fr.pp += 1
            return Next("rUnop")
        if op == "binop":
            b = self._num(fr.get(ins.args[1]), "rBinop")
            c = self._num(fr.get(ins.args[2]), "rBinop")
            try:
                fr.regs[ins.args[0]] = Num(ops.apply_binop(ins.args[3], b, c, w))
            except ZeroDivisionError:
                raise _StuckSignal("rBinop", "division by zero")
            fr.pp += 1
            return Next("rBinop")
        if op == "cmp":
            b = self._num(fr.get(ins.args[1]), "rCmp")
            c = self._num(fr.get(ins.args[2]), "rCmp")
            fr.regs[ins.args[0]] = Num(0 if b == c else (1 if b > c else -1))
            fr.pp += 1
            return Next("rCmp")
        if op == "if-test":
            a = self._num(fr.get(ins.args[0]), "rIfTest")
            b = self._num(fr.get(ins.args[1]), "rIfTest")
            taken = ops.apply_relop(ins.args[3], a, b)
            fr.pp += ins.args[2] if taken else 1
            return Next("rIfTestT" if taken else "rIfTestF")
        if op == "if-testz":
            a = self._num(fr.get(ins.args[0]), "rIfTestz")
            taken = ops.apply_relop(ins.args[2], a, 0)
            fr.pp += ins.args[1] if taken else 1
            return Next("rIfTestzT" if taken else "rIfTestzF")
        if op == "nop":
            fr.pp += 1
            return Next("rNop")
        if op == "goto":
            fr.pp += ins.args[0]
            return Next("rGoto")
        if op == "rand":
            return RandChoice(ins.args[0])

        if op == "array-length":
            ar, _ = self._loc(state, fr.get(ins.args[1]), "rArrayLength")
            if not isinstance(ar, Arr):
                raise _StuckSignal("rArrayLength", "not an array")
            fr.regs[ins.args[0]] = Num(ops.wrap(ar.length, w))
            fr.pp += 1
            return Next("rArrayLength")
        if op == "new-array":
            n = self._num(fr.get(ins.args[1]), "rNewArray")
            if n < 0:
                raise _StuckSignal("rNewArray", "negative length")
            l = state.next_free_location()
            state.heap[l] = default_array(n)
            fr.regs[ins.args[0]] = Loc(l)
            fr.pp += 1
            return Next("rNewArray")
        if op in ("filled-new-array", "filled-new-array-range"):
            if op == "filled-new-array":
                n = ins.args[5]
                vals = [fr.get(r) for r in ins.args[:n]]
            else:
                vk, n = ins.args[0], ins.args[1]
                vals = [fr.get(vk + i) for i in range(n)]
            l = state.next_free_location()
            ar = default_array(n)
            for i, v in enumerate(vals):
                ar.cells[i] = v
            state.heap[l] = ar
            fr.regs[RES_LO] = Loc(l)
            fr.regs[RES_UP] = VOID
            fr.pp += 1
            return Next("rFilledNewArrayR")
        if op == "fill-array-data":
            ar, l = self._loc(state, fr.get(ins.args[0]), "rFillArrayData")
            data = ins.args[1]
            if not isinstance(ar, Arr) or len(data) > ar.length:
                raise _StuckSignal("rFillArrayData", "array too short")
            for i, u in enumerate(data):
                ar.cells[i] = Num(ops.wrap(u, w))
            fr.pp += 1
            return Next("rFillArrayData")
        if op == "aget":
            ar, _ = self._loc(state, fr.get(ins.args[1]), "rAget")
            i = self._num(fr.get(ins.args[2]), "rAget")
            if not isinstance(ar, Arr) or not (0 <= i < ar.length) or i not in ar.cells:
                raise _StuckSignal("rAget", "index out of bounds")
            fr.regs[ins.args[0]] = ar.cells[i]
            fr.pp += 1
            return Next("rAget")
        if op == "aput":
            ar, _ = self._loc(state, fr.get(ins.args[1]), "rAput")
            i = self._num(fr.get(ins.args[2]), "rAput")
            if not isinstance(ar, Arr) or not (0 <= i < ar.length):
                raise _StuckSignal("rAput", "index out of bounds")
            ar.cells[i] = fr.get(ins.args[0])
            fr.pp += 1
            return Next("rAput")

        if op == "instance-of":
            o, _ = self._loc(state, fr.get(ins.args[1]), "rInstanceOf")
            ok = isinstance(o, Obj) and o.cls == ins.args[2]
            fr.regs[ins.args[0]] = Num(1 if ok else 0)
            fr.pp += 1
            return Next("rInstanceOfTrue" if ok else "rInstanceOfFalse")
        if op == "new-instance":
            cls = ins.args[1]
            l = state.next_free_location()
            state.heap[l] = default_object(self.program, cls)
            fr.regs[ins.args[0]] = Loc(l)
            fr.pp += 1
            return Next("rNewInstance")
        if op == "const-string":
            l = self.name_ref("str:" + ins.args[1])
            if l is None:
                raise _StuckSignal("rConstString", "unknown string")
            fr.regs[ins.args[0]] = Loc(l)
            fr.pp += 1
            return Next("rConstString")
        if op == "const-class":
            l = self.name_ref("cls:" + ins.args[1])
            if l is None:
                raise _StuckSignal("rConstClass", "unknown class")
            fr.regs[ins.args[0]] = Loc(l)
            fr.pp += 1
            return Next("rConstClass")
        if op == "iget":
            o, _ = self._loc(state, fr.get(ins.args[1]), "rIget")
            f = self._field(o, ins.args[2], "rIget")
            fr.regs[ins.args[0]] = o.fields[f]
            fr.pp += 1
            return Next("rIget")
        if op == "iput":
            o, _ = self._loc(state, fr.get(ins.args[1]), "rIput")
            f = self._field(o, ins.args[2], "rIput")
            o.fields[f] = fr.get(ins.args[0])
            fr.pp += 1
            return Next("rIput")
        if op == "sget":
            o, f = self._static(state, ins.args[1], "rSget")
            fr.regs[ins.args[0]] = o.fields[f]
            fr.pp += 1
            return Next("rSget")
        if op == "sput":
            o, f = self._static(state, ins.args[1], "rSput")
            o.fields[f] = fr.get(ins.args[0])
            fr.pp += 1
            return Next("rSput")

        if op in INVOKE_KIND:
            return self._invoke(state, ins)
        if op == "move-result":
            fr.regs[ins.args[0]] = fr.get(RES_LO)
            fr.pp += 1
            return Next("rMoveR")
        if op in ("return", "return-void"):
            value = fr.get(ins.args[0]) if op == "return" else VOID
            if len(state.frames) > 1:
                state.frames.pop()
                caller = state.frame
                caller.pp += 1
                caller.regs[RES_LO] = value  # lo(v) = v
                caller.regs[RES_UP] = VOID   # up only serves -wide, unsupported
                return Next("rReturn" if op == "return" else "rReturnV")
            return Returned(value)
        if op.endswith("-wide"):
            raise _StuckSignal("rWide", "wide variants are unsupported")
        raise _StuckSignal("fetch", "unhandled mnemonic {}".format(op))

    def _field(self, o, fid: str, rule: str) -> str:
        res = self.program.lookup_field(fid)
        if res is None:
            raise _StuckSignal(rule, "undeclared field {}".format(fid))
        _, f = res
        if not isinstance(o, Obj) or f not in o.fields:
            raise _StuckSignal(rule, "object has no field {}".format(f))
        return f

    def _static(self, state: ConcreteState, fid: str, rule: str):
        l = self.name_ref(fid)
        res = self.program.lookup_field(fid)
        if l is None or res is None or l not in state.heap:
            raise _StuckSignal(rule, "no statics for {}".format(fid))
        o = state.heap[l]
        _, f = res
        if not isinstance(o, Obj) or f not in o.fields:
            raise _StuckSignal(rule, "object has no field {}".format(f))
        return o, f

    def _invoke(self, state: ConcreteState, ins: Instr):
        kind = INVOKE_KIND[ins.op]
        mid = ins.args[-1]
        fr = state.frame
        ranged = ins.op.endswith("-range")
        if ranged:
            vk, n = ins.args[0], ins.args[1]
            arg_vals = tuple(fr.get(vk + i) for i in range(n))
        else:
            n = ins.args[5]
            arg_vals = tuple(fr.get(r) for r in ins.args[:n])

        mal_kind = self.program.mal_kind_of(mid)
        if mal_kind is not None:
            if mal_kind != kind:
                raise _StuckSignal("rAdvInv", "mal id {} invoked as {}".format(mid, kind))
            # The attacker observes all five listed registers (AdvInv shape)
            # for the non-range form, the n-argument window otherwise.
            if ranged:
                observed = arg_vals
            else:
                observed = tuple(fr.get(r) for r in ins.args[:5])
            return MalCall(kind, mid, observed)

        if kind == "static":
            label = self.program.lookup_static.get(mid)
            if label is None:
                raise _StuckSignal("rISt", "unresolved static {}".format(mid))
            state.frames.append(Frame(label, 0, def_regs(arg_vals)))
            return Next("rISt" if not ranged else "rIStR")

        if not arg_vals:
            raise _StuckSignal("rIDR", "instance call without receiver")
        recv = arg_vals[0]
        o, l = self._loc(state, recv, "rIDR")
        if not isinstance(o, Obj):
            raise _StuckSignal("rIDR", "receiver is not an object")
        table = getattr(self.program, "lookup_" + kind)
        label = table.get((mid, o.cls))
        if label is None:
            raise _StuckSignal("rIDR", "no {} method {} on class {}".format(kind, mid, o.cls))
        if kind == "direct" and ranged and (mid, o.cls) in self.lib_split:
            return LibCall(mid, o.cls, label, l, arg_vals)
        state.frames.append(Frame(label, 0, def_regs(arg_vals)))
        return Next({"direct": "rIDR", "virtual": "rIVR", "super": "rISpR"}[kind])

    # -- resolution helpers for drivers --------------------------------------

    def apply_rand(self, state: ConcreteState, reg: int, n: int) -> None:
        state.frame.regs[reg] = Num(ops.wrap(n, self.width))
        state.frame.pp += 1

    def apply_adv_resp(self, state: ConcreteState, value) -> None:
        fr = state.frame
        fr.regs[RES_LO] = value
        fr.regs[RES_UP] = VOID
        fr.pp += 1


class _StuckSignal(Exception):
    def __init__(self, rule: str, reason: str):
        self.rule = rule
        self.reason = reason


# ---------------------------------------------------------------------------
# Drivers: step, run, output distributions
# ---------------------------------------------------------------------------


@dataclass
class StepOutcome:
    state: object   # ConcreteState, ValueFinal, AdvOut, Stuck
    steps: int
    event: Optional[tuple] = None
    rule: str = ""


def step(vm: Vm, state: ConcreteState, rng: Rng, attacker: AttackerHook) -> StepOutcome:
    """One transition of the combined program/attacker system.  The input
    state is mutated on ordinary rules; interactive and probabilistic
    rules are resolved with the given rng and attacker."""
    marker = vm.micro_step(state)
    if isinstance(marker, Stuck):
        return StepOutcome(marker, 0, rule=marker.rule)
    if isinstance(marker, Next):
        return StepOutcome(state, marker.cost, rule=marker.rule)
    if isinstance(marker, RandChoice):
        n = rng.draw(vm.width)
        vm.apply_rand(state, marker.reg, n)
        return StepOutcome(state, 1, event=("rand", n), rule="Prob")
    if isinstance(marker, MalCall):
        inp = (marker.mid,) + marker.args
        new_as, k, reply = attacker.respond(state.attacker_state, inp, rng)
        if reply is None:
            return StepOutcome(Stuck("rAdvInv", "attacker gave no reply"), 0, rule="rAdvInv")
        kind, payload = reply
        if kind == "resp":
            state.attacker_state = new_as
            vm.apply_adv_resp(state, payload)
            return StepOutcome(
                state, k + 2,
                event=("adv", marker.mid, tuple(render_value(v) for v in marker.args), render_value(payload)),
                rule="AdvInv",
            )
        return StepOutcome(
            AdvOut(payload), k + 1,
            event=("adv_final", payload), rule="AdvRet",
        )
    if isinstance(marker, LibCall):
        return StepOutcome(
            Stuck("rIDR", "library call reached the monolithic driver"), 0, rule="rIDR"
        )
    if isinstance(marker, Returned):
        final = ValueFinal(marker.value, freeze_heap(state.heap), state.attacker_state)
        return StepOutcome(final, 1, rule="rReturnF")
    raise AssertionError(marker)


@dataclass
class RunResult:
    final: object  # ValueFinal | AdvOut | Stuck | Timeout
    trace: tuple
    total_steps: int


def run(
    vm: Vm,
    state: ConcreteState,
    rng: Rng,
    attacker: AttackerHook,
    max_steps: int = 100_000,
) -> RunResult:
    """Iterate step until a final state, stuckness, or budget exhaustion.
    After a value final state the attacker is consulted once (AdvFin); its
    declining leaves the value final state as the outcome."""
    if state.attacker_state is None:
        state.attacker_state = attacker.start_state()
    total = 0
    trace: list[tuple] = []
    while True:
        out = step(vm, state, rng, attacker)
        total += out.steps
        if out.event is not None:
            trace.append(out.event)
        if total > max_steps:
            return RunResult(Timeout(), tuple(trace), total)
        if isinstance(out.state, Stuck):
            return RunResult(out.state, tuple(trace), total)
        if isinstance(out.state, AdvOut):
            return RunResult(out.state, tuple(trace), total)
        if isinstance(out.state, ValueFinal):
            final = out.state
            new_as, k, reply = attacker.respond(final.attacker_state, (), rng)
            if reply is not None and reply[0] == "final":
                total += k + 2
                trace.append(("adv_final", reply[1]))
                if total > max_steps:
                    return RunResult(Timeout(), tuple(trace), total)
                return RunResult(AdvOut(reply[1]), tuple(trace), total)
            return RunResult(final, tuple(trace), total)
        state = out.state


def outcome_key(final) -> tuple:
    if isinstance(final, ValueFinal):
        return ("value", render_value(final.value), final.heap)
    if isinstance(final, AdvOut):
        return ("advout", final.token)
    if isinstance(final, Stuck):
        return ("stuck", final.rule)
    return ("timeout",)


def output_distribution(
    vm: Vm,
    make_state,
    attacker: AttackerHook,
    mode: str = "exhaustive",
    trials: int = 10_000,
    max_steps: int = 10_000,
    seed: int = 0,
    branch_limit: int = 1_000_000,
) -> dict:
    """Distribution over final outcomes.

    Exhaustive mode enumerates every rand outcome with exact rational
    probabilities (width <= 8 and a deterministic attacker required);
    Monte-Carlo mode estimates frequencies over per-trial seeds derived as
    seed + trial index.  make_state is a zero-argument initial-state
    factory (states are consumed).
    """
    if mode == "exhaustive":
        if vm.width > 8:
            raise VmError("exhaustive mode requires width <= 8")
        dist: dict = {}
        branches = 0

        def explore(state: ConcreteState, prob: Fraction, total: int):
            nonlocal branches
            branches += 1
            if branches > branch_limit:
                raise VmError("exhaustive enumeration exceeded {} branches".format(branch_limit))
            while True:
                if total > max_steps:
                    _acc(dist, ("timeout",), prob)
                    return
                marker = vm.micro_step(state)
                if isinstance(marker, Next):
                    total += marker.cost
                elif isinstance(marker, Stuck):
                    _acc(dist, outcome_key(marker), prob)
                    return
                elif isinstance(marker, RandChoice):
                    total += 1
                    if total > max_steps:
                        _acc(dist, ("timeout",), prob)
                        return
                    space = 1 << vm.width
                    p = prob / space
                    for n in range(space):
                        branch = state.copy()
                        vm.apply_rand(branch, marker.reg, ops.wrap(n, vm.width))
                        explore(branch, p, total)
                    return
                elif isinstance(marker, MalCall):
                    inp = (marker.mid,) + marker.args
                    new_as, k, reply = attacker.respond(state.attacker_state, inp)
                    if reply is None:
                        _acc(dist, ("stuck", "rAdvInv"), prob)
                        return
                    if reply[0] == "resp":
                        state.attacker_state = new_as
                        vm.apply_adv_resp(state, reply[1])
                        total += k + 2
                    else:
                        total += k + 1
                        _acc(dist, ("advout", reply[1]) if total <= max_steps else ("timeout",), prob)
                        return
                elif isinstance(marker, Returned):
                    total += 1
                    final = ValueFinal(marker.value, freeze_heap(state.heap), state.attacker_state)
                    new_as, k, reply = attacker.respond(final.attacker_state, ())
                    if reply is not None and reply[0] == "final":
                        total += k + 2
                        key = ("advout", reply[1])
                    else:
                        key = outcome_key(final)
                    _acc(dist, key if total <= max_steps else ("timeout",), prob)
                    return
                else:
                    raise AssertionError(marker)

        s0 = make_state()
        s0.attacker_state = attacker.start_state()
        explore(s0, Fraction(1), 0)
        return dist

    if mode == "montecarlo":
        counts: dict = {}
        for t in range(trials):
            rng = Rng(seed + t)
            s0 = make_state()
            res = run(vm, s0, rng, attacker, max_steps)
            key = outcome_key(res.final)
            counts[key] = counts.get(key, 0) + 1
        return {k: Fraction(v, trials) for k, v in counts.items()}

    raise VmError("unknown mode {!r}".format(mode))


def _acc(dist: dict, key, prob: Fraction) -> None:
    dist[key] = dist.get(key, Fraction(0)) + prob


# ---------------------------------------------------------------------------
# Reachable locations and heap slices
# ---------------------------------------------------------------------------


def lreachable(heap: dict, l: int) -> set:
    """Fixed point of field-following from l: the location itself when
    defined, plus everything reachable through object fields.  Arrays do
    not contribute outgoing references; undefined locations reach nothing."""
    if l not in heap:
        return set()
    seen: set = set()
    stack = [l]
    while stack:
        cur = stack.pop()
        if cur in seen or cur not in heap:
            continue
        seen.add(cur)
        o = heap[cur]
        if isinstance(o, Obj):
            for v in o.fields.values():
                if isinstance(v, Loc):
                    stack.append(v.loc)
    return seen


def heap_slice(heap: dict, l: int) -> dict:
    """The heap restricted to lreachable(l)."""
    return {x: heap[x] for x in lreachable(heap, l)}
