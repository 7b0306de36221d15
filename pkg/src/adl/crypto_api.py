"""Library specifications, the toy computational implementation, and
harmonization checking.

A library specification maps method calls (keyed by method id plus a
predicate over the receiver object's fields) and every unary/binary/
relational operator to a named symbolic operation.  Operator entries
default to the lifted destructors, which makes the specification total on
the operator sets as required.

Method symbolic operations are written in the recipe grammar with three
extra leaf forms, resolved at call time:

    x1..xk     the call's register arguments (x1 is the receiver image),
    field:f    the receiver object's field f, embedded as a term,
    fresh!r    a protocol nonce drawn fresh per invocation.

Operations marked heap-returning must evaluate to pair(result, heap');
pure operations are wrapped so the heap argument passes through unchanged.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

from . import ops
from .bytecode import LibSpecDecl, Program
from .concrete_vm import Num, Obj
from .encoding import value_hat
from .terms import (
    Op,
    SymbolicModel,
    Term,
    iota_decode,
    iota_encode,
    lifted_op_name,
    parse_op,
    proto_nonce,
    render_op,
)

_FRESH_PREFIX = "fresh!"
_FIELD_PREFIX = "field:"


class LibSpecError(ValueError):
    pass


@dataclass(frozen=True)
class SymOpSpec:
    name: str
    expr: Op
    arity: int          # number of x-parameters the expression may use
    result_class: str   # "b" (bitstring image) or "c" (opaque)
    heap: bool          # expression already yields pair(result, heap')


@dataclass(frozen=True)
class MethodEntry:
    cid: str
    mid: str
    predicate: tuple
    symop: SymOpSpec


class LibSpec:
    """Operator entries (total on unop/binop/relop) plus method entries."""

    def __init__(self, method_entries: Sequence[MethodEntry] = (),
                 op_entries: Optional[dict] = None):
        self.method_entries = list(method_entries)
        self.op_entries = dict(op_entries or {})
        for name in ops.UNOP_NAMES:
            self.op_entries.setdefault(name, Op(lifted_op_name(name), (Op.x(1),)))
        for name in ops.BINOP_NAMES + ops.RELOP_NAMES:
            self.op_entries.setdefault(name, Op(lifted_op_name(name), (Op.x(1), Op.x(2))))
        self._check_exclusive()

    def _check_exclusive(self):
        by_key: dict = {}
        for e in self.method_entries:
            by_key.setdefault((e.cid, e.mid), []).append(e)
        for key, entries in by_key.items():
            for i in range(len(entries)):
                for j in range(i + 1, len(entries)):
                    if _predicates_overlap(entries[i].predicate, entries[j].predicate):
                        raise LibSpecError(
                            "overlapping predicates for {}.{}".format(*key)
                        )

    def split_keys(self) -> set:
        return {(e.mid, e.cid) for e in self.method_entries}

    def operator_op(self, op: str) -> Op:
        return self.op_entries[op]


def _predicates_overlap(p1: tuple, p2: tuple) -> bool:
    eqs1 = {a[1]: a[2] for a in p1 if a[0] == "eq"}
    eqs2 = {a[1]: a[2] for a in p2 if a[0] == "eq"}
    for f, v in eqs1.items():
        if f in eqs2 and eqs2[f] != v:
            return False
    return True


def pred_matches(predicate: tuple, obj: Obj) -> bool:
    for atom in predicate:
        if atom[0] == "has":
            if atom[1] not in obj.fields:
                return False
        else:
            _, f, v = atom
            cell = obj.fields.get(f)
            if not isinstance(cell, Num) or cell.value != v:
                return False
    return True


def resolve(spec: LibSpec, mid: str, obj: Obj) -> Optional[MethodEntry]:
    """The unique method entry matching (mid, receiver object), or None.
    Uniqueness is guaranteed by the load-time exclusivity check."""
    for e in spec.method_entries:
        if e.mid == mid and e.cid == obj.cls and pred_matches(e.predicate, obj):
            return e
    return None


def load_registry(text: str) -> dict:
    """Named symbolic-operation registry (JSON): name -> SymOpSpec."""
    raw = json.loads(text)
    reg = {}
    for name, entry in raw.items():
        reg[name] = SymOpSpec(
            name=name,
            expr=parse_op(entry["expr"]),
            arity=int(entry.get("arity", 0)),
            result_class=entry.get("result_class", "c"),
            heap=bool(entry.get("heap", False)),
        )
        if reg[name].result_class not in ("b", "c"):
            raise LibSpecError("{}: result_class must be 'b' or 'c'".format(name))
    return reg


def registry_to_json(reg: dict) -> str:
    return json.dumps(
        {
            n: {
                "expr": render_op(s.expr),
                "arity": s.arity,
                "result_class": s.result_class,
                "heap": s.heap,
            }
            for n, s in sorted(reg.items())
        },
        indent=2,
    )


def build_libspec(decls: Sequence[LibSpecDecl], registry: dict) -> LibSpec:
    entries = []
    for d in decls:
        if d.opname not in registry:
            raise LibSpecError("unknown symbolic operation {!r}".format(d.opname))
        entries.append(MethodEntry(d.cid, d.mid, d.predicate, registry[d.opname]))
    return LibSpec(entries)


def libspec_for_program(p: Program, registry: dict) -> LibSpec:
    return build_libspec(p.libspec_decls, registry)


class FreshNonces:
    """Per-run counter for fresh!-leaves; nonce names stay unique."""

    def __init__(self):
        self.counter = 0

    def draw(self, base: str) -> Term:
        self.counter += 1
        return proto_nonce("{}{}".format(base, self.counter))


def instantiate_symop(entry: SymOpSpec, receiver: Optional[Obj], width: int,
                      fresh: FreshNonces) -> Op:
    """Ground the field:/fresh! leaves of a method operation; appends the
    pass-through pairing for pure operations (heap parameter = arity + 1)."""

    def subst(o: Op) -> Op:
        if o.param:
            return o
        if o.head.startswith(_FRESH_PREFIX):
            t = fresh.draw(o.head[len(_FRESH_PREFIX):])
            return Op(t.head)
        if o.head.startswith(_FIELD_PREFIX):
            f = o.head[len(_FIELD_PREFIX):]
            if receiver is None or f not in receiver.fields:
                raise LibSpecError("receiver has no field {!r}".format(f))
            return _term_as_op(value_hat(receiver.fields[f], width))
        return Op(o.head, tuple(subst(a) for a in o.args))

    body = subst(entry.expr)
    if entry.heap:
        return body
    return Op("pair", (body, Op.x(entry.arity + 1)))


def _term_as_op(t: Term) -> Op:
    return Op(t.head, tuple(_term_as_op(a) for a in t.args))


# ---------------------------------------------------------------------------
# Computational implementation (toy, security-free by design)
# ---------------------------------------------------------------------------


class Impl:
    """Deterministic bitstring functions per constructor/destructor and a
    seeded sampler per protocol nonce.  Realizes the interface of a
    computational implementation only; no security properties intended."""

    def __init__(self, funcs: dict, nonce_len: int):
        self.funcs = funcs
        self.nonce_len = nonce_len

    def apply(self, name: str, args: Sequence[str]) -> Optional[str]:
        fn = self.funcs.get(name)
        if fn is None:
            raise LibSpecError("no implementation for {!r}".format(name))
        try:
            return fn(*args)
        except ZeroDivisionError:
            return None

    def draw_nonce(self, rng: random.Random) -> str:
        return format(rng.getrandbits(self.nonce_len), "0{}b".format(self.nonce_len))


def _digest_bits(parts: Sequence[str], n: int) -> str:
    h = hashlib.sha256("|".join(parts).encode()).digest()
    return "".join(format(b, "08b") for b in h)[:n]


_PAIR_SENTINEL = None  # pair uses a unary length prefix: 1^len(a) 0 a b


def _pair_bits(a: str, b: str) -> str:
    return "1" * len(a) + "0" + a + b


def _unpair_bits(s: str):
    n = 0
    while n < len(s) and s[n] == "1":
        n += 1
    if n >= len(s) or s[n] != "0":
        return None
    rest = s[n + 1:]
    if len(rest) < n:
        return None
    return rest[:n], rest[n:]


TAG_LEN = 32


def toy_impl(model: SymbolicModel, width: int, nonce_len: int = 16) -> Impl:
    """Bitstring semantics for the builtin model plus enc/dec if present.

    enc(k, m, r) = r || (m xor keystream(k, r)) || tag(k, r, m); dec
    verifies the tag, so decryption under a wrong key is undefined.
    """
    from .encoding import tag_bits, _VOID_BITS, _LOC_PREFIX  # noqa: F401

    def keystream(k: str, r: str, n: int) -> str:
        out = []
        i = 0
        while len(out) < n:
            out.extend(_digest_bits([k, r, str(i)], 256))
            i += 1
        return "".join(str(b) for b in out)[:n]

    funcs: dict = {
        "emp": lambda: "",
        "string_0": lambda s: "0" + s,
        "string_1": lambda s: "1" + s,
        "unstring_0": lambda s: s[1:] if s.startswith("0") else None,
        "unstring_1": lambda s: s[1:] if s.startswith("1") else None,
        "equals": lambda a, b: a if a == b else None,
        "pair": _pair_bits,
        "fst": lambda s: (_unpair_bits(s) or (None, None))[0],
        "snd": lambda s: (_unpair_bits(s) or (None, None))[1],
        "iszero": lambda s: s if s and set(s) == {"0"} else None,
        "void_v": lambda: _VOID_BITS,
        "loc_v": lambda s: _LOC_PREFIX + s,
        "unloc": lambda s: s[2:] if s.startswith(_LOC_PREFIX) else None,
        "is_void": lambda s: s if s == _VOID_BITS else None,
    }

    for name in model.symbols:
        if name.startswith("tag_"):
            funcs[name] = (lambda bits: (lambda: bits))(tag_bits(name[len("tag_"):]))
            funcs["is_" + name[len("tag_"):]] = (
                lambda bits: (lambda s: s if s == bits else None)
            )(tag_bits(name[len("tag_"):]))

    # Lifted operators share the fixed-width numeric semantics.
    def unop_fn(op):
        def f(a):
            if not a:
                return None
            return ops.int_to_bits(ops.apply_unop(op, ops.bits_to_int(a), len(a)), len(a))
        return f

    def binop_fn(op):
        def f(a, b):
            if not a or len(a) != len(b):
                return None
            return ops.int_to_bits(ops.apply_binop(op, ops.bits_to_int(a), ops.bits_to_int(b), len(a)), len(a))
        return f

    def relop_fn(op):
        def f(a, b):
            if not a or len(a) != len(b):
                return None
            return "1" if ops.apply_relop(op, ops.bits_to_int(a), ops.bits_to_int(b)) else "0"
        return f

    for name in ops.UNOP_NAMES:
        funcs[lifted_op_name(name)] = unop_fn(name)
    for name in ops.BINOP_NAMES:
        funcs[lifted_op_name(name)] = binop_fn(name)
    for name in ops.RELOP_NAMES:
        funcs[lifted_op_name(name)] = relop_fn(name)

    if "enc" in model.symbols:
        def enc(k: str, m: str, r: str) -> str:
            body = "".join("1" if a != b else "0" for a, b in zip(m, keystream(k, r, len(m))))
            return r + body + _digest_bits(["t", k, r, m], TAG_LEN)

        def dec(k: str, c: str):
            if len(c) < nonce_len + TAG_LEN:
                return None
            r = c[:nonce_len]
            body = c[nonce_len:-TAG_LEN]
            tag = c[-TAG_LEN:]
            m = "".join("1" if a != b else "0" for a, b in zip(body, keystream(k, r, len(body))))
            if _digest_bits(["t", k, r, m], TAG_LEN) != tag:
                return None
            return m

        funcs["enc"] = enc
        funcs["dec"] = dec

    # Heap association-list constructors reuse the pair encoding.
    funcs.setdefault("hnil", lambda: "")
    funcs.setdefault("fnil", lambda: "")
    funcs.setdefault("hcons", lambda l, c, rest: _pair_bits(_pair_bits(l, c), rest))
    funcs.setdefault("fcons", lambda k, v, rest: _pair_bits(_pair_bits(k, v), rest))
    funcs.setdefault("obj_t", lambda cls, fl: _pair_bits(cls, fl))
    funcs.setdefault("arr_t", lambda ln, cl: _pair_bits(ln, cl))

    return Impl(funcs, nonce_len)


def impl_eval_op(impl: Impl, op: Op, inputs: Sequence[str], seed: int) -> Optional[str]:
    """Tree evaluation over bitstrings; nonce leaves draw from the seeded
    stream, cached per nonce name within the call; undefined propagates."""
    rng = random.Random(seed)
    cache: dict[str, str] = {}

    def ev(o: Op) -> Optional[str]:
        if o.param:
            if o.param > len(inputs):
                raise LibSpecError("operation needs x{} but got {} inputs".format(o.param, len(inputs)))
            return inputs[o.param - 1]
        if o.head.startswith("n!") or o.head.startswith("n?"):
            if o.head not in cache:
                cache[o.head] = impl.draw_nonce(rng)
            return cache[o.head]
        vals = []
        for a in o.args:
            v = ev(a)
            if v is None:
                return None
            vals.append(v)
        return impl.apply(o.head, vals)

    return ev(op)


# ---------------------------------------------------------------------------
# Harmonization
# ---------------------------------------------------------------------------


class HarmonizablePts:
    """The narrow library interface harmonize_check drives: one lc -> lr
    round trip computing an entry on bitstring inputs under a seed."""

    def call(self, entry_key: str, inputs: Sequence[str], seed: int) -> Optional[str]:
        raise NotImplementedError


class ImplLibrary(HarmonizablePts):
    """Reference library: computes each entry with the implementation
    itself (the honest adapter every toy library should agree with)."""

    def __init__(self, spec: LibSpec, impl: Impl, symops: dict):
        self.spec = spec
        self.impl = impl
        self.symops = symops  # entry_key -> Op (ground except parameters)

    def call(self, entry_key: str, inputs: Sequence[str], seed: int) -> Optional[str]:
        return impl_eval_op(self.impl, self.symops[entry_key], inputs, seed)


class BitFlipLibrary(HarmonizablePts):
    """Mutant wrapper flipping the first bit of every defined response."""

    def __init__(self, inner: HarmonizablePts):
        self.inner = inner

    def call(self, entry_key, inputs, seed):
        out = self.inner.call(entry_key, inputs, seed)
        if out:
            flipped = ("1" if out[0] == "0" else "0") + out[1:]
            return flipped
        return out


@dataclass
class HarmonizeReport:
    ok: bool
    checked: int
    uncovered: list
    counterexample: Optional[tuple] = None  # (entry, inputs, seed, got, want)
    max_discrepancy: float = 0.0


def harmonize_check(
    library: HarmonizablePts,
    spec: LibSpec,
    impl: Impl,
    symops: dict,
    samples: int = 1000,
    seed: int = 0,
    input_width: int = 8,
) -> HarmonizeReport:
    """Compare the library's lc->lr results with the implementation of the
    specified symbolic operation on random inputs, seed-matched: the
    verdict is true iff every sampled response is exactly equal.  Entries
    whose key never appears in `symops` are reported uncovered, not failing.
    """
    rng = random.Random(seed)
    checked = 0
    mismatches = 0
    counterexample = None
    keys = sorted(symops)
    expected = {e.symop.name for e in spec.method_entries}
    expected |= {"op:" + name for name in spec.op_entries}
    uncovered = sorted(k for k in expected if k not in symops)
    for i in range(samples):
        key = keys[i % len(keys)]
        op = symops[key]
        arity = op.arity()
        inputs = [
            format(rng.getrandbits(input_width), "0{}b".format(input_width))
            for _ in range(arity)
        ]
        call_seed = rng.getrandbits(32)
        got = library.call(key, inputs, call_seed)
        want = impl_eval_op(impl, op, inputs, call_seed)
        checked += 1
        if got != want:
            mismatches += 1
            if counterexample is None:
                counterexample = (key, tuple(inputs), call_seed, got, want)
    return HarmonizeReport(
        ok=mismatches == 0,
        checked=checked,
        uncovered=uncovered,
        counterexample=counterexample,
        max_discrepancy=mismatches / checked if checked else 0.0,
    )
