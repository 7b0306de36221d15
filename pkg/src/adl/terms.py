"""Dolev-Yao term algebra: terms, symbolic models, symbolic operations.

Terms are built from constructors and nonces only; destructors are partial
maps over terms held by the model and never occur inside a term.  The
undefined result ("bottom") is represented as None throughout.

The bitstring embedding encodes a bitstring b_l...b_0 as
string_{b_l}(...(string_{b_0}(emp))...), leftmost bit outermost.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

from . import ops

CONSTRUCTOR = "constructor"
DESTRUCTOR = "destructor"
PROTO_NONCE = "protocol-nonce"
ATT_NONCE = "attacker-nonce"

_PROTO_PREFIX = "n!"
_ATT_PREFIX = "n?"


class Term:
    """Immutable term: a constructor application or a nonce.

    Nonces carry their kind in the head spelling: ``n!x`` is a protocol
    nonce, ``n?x`` an attacker nonce.  Identity is structural.
    """

    __slots__ = ("head", "args", "_hash")

    def __init__(self, head: str, args: Sequence["Term"] = ()):
        self.head = head
        self.args = tuple(args)
        self._hash = hash((head, self.args))

    def is_nonce(self) -> bool:
        return self.head.startswith(_PROTO_PREFIX) or self.head.startswith(_ATT_PREFIX)

    def is_protocol_nonce(self) -> bool:
        return self.head.startswith(_PROTO_PREFIX)

    def is_attacker_nonce(self) -> bool:
        return self.head.startswith(_ATT_PREFIX)

    def size(self) -> int:
        return 1 + sum(a.size() for a in self.args)

    def subterms(self):
        yield self
        for a in self.args:
            yield from a.subterms()

    def __eq__(self, other):
        return (
            isinstance(other, Term)
            and self._hash == other._hash
            and self.head == other.head
            and self.args == other.args
        )

    def __ne__(self, other):
        return not self.__eq__(other)

    def __hash__(self):
        return self._hash

    def __repr__(self):
        return "Term({})".format(render(self))


def proto_nonce(name: str) -> Term:
    return Term(_PROTO_PREFIX + name)


def att_nonce(name: str) -> Term:
    return Term(_ATT_PREFIX + name)


def render(t: Term) -> str:
    """Canonical textual rendering: f(t1,...,tn); nonces as n!x / n?x."""
    if not t.args:
        return t.head
    return "{}({})".format(t.head, ",".join(render(a) for a in t.args))


@dataclass(frozen=True)
class SymbolId:
    name: str
    arity: int
    kind: str

    def __post_init__(self):
        if self.kind in (PROTO_NONCE, ATT_NONCE) and self.arity != 0:
            raise ValueError("nonce {} must have arity 0".format(self.name))


class ModelError(ValueError):
    """Misuse of a symbolic model: arity mismatch, name collision, ..."""


DestructorFn = Callable[..., Optional[Term]]


class SymbolicModel:
    """A symbolic model: constructors, destructors with native semantics,
    and an optional message-type membership predicate.

    The message type T defaults to all terms over the model's constructors
    and nonces; a finitely generated grammar can be supplied as `member`.
    Models are immutable: extension and combination return new values.
    """

    def __init__(
        self,
        symbols: Iterable[SymbolId],
        destructor_fns: dict[str, DestructorFn],
        member: Optional[Callable[[Term], bool]] = None,
    ):
        self.symbols: dict[str, SymbolId] = {}
        for s in symbols:
            if s.name in self.symbols:
                raise ModelError("duplicate symbol {}".format(s.name))
            self.symbols[s.name] = s
        for name in destructor_fns:
            s = self.symbols.get(name)
            if s is None or s.kind != DESTRUCTOR:
                raise ModelError("semantics given for non-destructor {}".format(name))
        for s in self.symbols.values():
            if s.kind == DESTRUCTOR and s.name not in destructor_fns:
                raise ModelError("destructor {} lacks semantics".format(s.name))
        self.destructor_fns = dict(destructor_fns)
        self.member = member

    def constructor_names(self) -> list[str]:
        return sorted(n for n, s in self.symbols.items() if s.kind == CONSTRUCTOR)

    def destructor_names(self) -> list[str]:
        return sorted(n for n, s in self.symbols.items() if s.kind == DESTRUCTOR)

    def arity(self, name: str) -> int:
        return self.symbols[name].arity

    def is_constructor(self, name: str) -> bool:
        s = self.symbols.get(name)
        return s is not None and s.kind == CONSTRUCTOR

    def is_destructor(self, name: str) -> bool:
        s = self.symbols.get(name)
        return s is not None and s.kind == DESTRUCTOR

    def in_message_type(self, t: Term) -> bool:
        return True if self.member is None else self.member(t)

    def extended(
        self,
        symbols: Iterable[SymbolId] = (),
        destructor_fns: Optional[dict[str, DestructorFn]] = None,
    ) -> "SymbolicModel":
        new_syms = list(self.symbols.values())
        for s in symbols:
            if s.name in self.symbols:
                raise ModelError("symbol {} already present".format(s.name))
            new_syms.append(s)
        fns = dict(self.destructor_fns)
        fns.update(destructor_fns or {})
        return SymbolicModel(new_syms, fns, self.member)


def eval_symbol(model: SymbolicModel, f, args: Sequence[Term]) -> Optional[Term]:
    """Evaluate one constructor, destructor, or nonce application.

    Returns None for the undefined result.  Arity mismatch is a usage
    error, distinct from an undefined application.
    """
    if isinstance(f, SymbolId):
        sid = f
    elif isinstance(f, str):
        if f.startswith(_PROTO_PREFIX) or f.startswith(_ATT_PREFIX):
            sid = SymbolId(f, 0, PROTO_NONCE if f.startswith(_PROTO_PREFIX) else ATT_NONCE)
        else:
            try:
                sid = model.symbols[f]
            except KeyError:
                raise ModelError("unknown symbol {!r}".format(f))
    else:
        raise ModelError("not a symbol: {!r}".format(f))
    if len(args) != sid.arity:
        raise ModelError(
            "{} expects {} arguments, got {}".format(sid.name, sid.arity, len(args))
        )
    if sid.kind in (PROTO_NONCE, ATT_NONCE):
        return Term(sid.name)
    if sid.kind == CONSTRUCTOR:
        t = Term(sid.name, args)
        return t if model.in_message_type(t) else None
    return model.destructor_fns[sid.name](*args)


class Op:
    """A symbolic operation (recipe): a finite tree whose nodes are
    constructors, destructors, nonces, or formal parameters x_i (i >= 1).
    """

    __slots__ = ("head", "args", "param", "_hash")

    def __init__(self, head: Optional[str], args: Sequence["Op"] = (), param: int = 0):
        # Exactly one of head / param is set; param >= 1 marks a leaf x_param.
        self.head = head
        self.args = tuple(args)
        self.param = param
        self._hash = hash((head, self.args, param))

    @staticmethod
    def x(i: int) -> "Op":
        if i < 1:
            raise ValueError("parameter indices start at 1")
        return Op(None, (), i)

    @staticmethod
    def apply(name: str, *args: "Op") -> "Op":
        return Op(name, args)

    def arity(self) -> int:
        if self.param:
            return self.param
        return max((a.arity() for a in self.args), default=0)

    def depth(self) -> int:
        """Leaves have depth 0; an application adds 1 over its deepest child."""
        if self.param or not self.args:
            return 0
        return 1 + max(a.depth() for a in self.args)

    def __eq__(self, other):
        return (
            isinstance(other, Op)
            and self._hash == other._hash
            and self.param == other.param
            and self.head == other.head
            and self.args == other.args
        )

    def __hash__(self):
        return self._hash

    def __repr__(self):
        return "Op({})".format(render_op(self))


def render_op(o: Op) -> str:
    if o.param:
        return "x{}".format(o.param)
    if not o.args:
        return o.head
    return "{}({})".format(o.head, ",".join(render_op(a) for a in o.args))


def eval_op(model: SymbolicModel, op: Op, inputs: Sequence[Term]) -> Optional[Term]:
    """Bottom-up evaluation of a recipe; any undefined node makes the whole
    tree undefined.  Requires len(inputs) >= op.arity()."""
    if op.param:
        if op.param > len(inputs):
            raise ModelError(
                "recipe needs x{} but only {} inputs given".format(op.param, len(inputs))
            )
        return inputs[op.param - 1]
    child_vals = []
    for a in op.args:
        v = eval_op(model, a, inputs)
        if v is None:
            return None
        child_vals.append(v)
    return eval_symbol(model, op.head, child_vals)


def term_to_op(t: Term) -> Op:
    """A ground recipe computing exactly t (constructor/nonce nodes only)."""
    return Op(t.head, tuple(term_to_op(a) for a in t.args))


# ---------------------------------------------------------------------------
# Bitstring embedding
# ---------------------------------------------------------------------------

EMP = "emp"
STRING0 = "string_0"
STRING1 = "string_1"


def iota_encode(bits: str) -> Term:
    """Encode a bitstring as nested string_0/string_1 applications with the
    leftmost bit outermost and emp innermost."""
    t = Term(EMP)
    for b in reversed(bits):
        if b == "0":
            t = Term(STRING0, (t,))
        elif b == "1":
            t = Term(STRING1, (t,))
        else:
            raise ValueError("not a bitstring: {!r}".format(bits))
    return t


def iota_decode(t: Term) -> Optional[str]:
    """Inverse of iota_encode on its range; None for terms outside it."""
    out = []
    while True:
        if t.head == EMP and not t.args:
            return "".join(out)
        if t.head == STRING0 and len(t.args) == 1:
            out.append("0")
        elif t.head == STRING1 and len(t.args) == 1:
            out.append("1")
        else:
            return None
        t = t.args[0]


def in_iota_range(t: Term) -> bool:
    return iota_decode(t) is not None


def iota_int(n: int, w: int) -> Term:
    """The bitstring image of a w-bit two's-complement number."""
    return iota_encode(ops.int_to_bits(n, w))


def lift_bitstring_fn(name: str, n: int, f: Callable[..., str]):
    """Derive a destructor from a total function on bitstrings.

    The destructor is defined only on terms in range(iota):
    d(t_1,...,t_n) = iota(f(iota^-1(t_1),...,iota^-1(t_n))).
    Returns the SymbolId and its semantics; attach with
    SymbolicModel.extended, which rejects name collisions.
    """
    sid = SymbolId(name, n, DESTRUCTOR)

    def dfun(*args: Term) -> Optional[Term]:
        bits = []
        for a in args:
            s = iota_decode(a)
            if s is None:
                return None
            bits.append(s)
        try:
            res = f(*bits)
        except ZeroDivisionError:
            return None
        if res is None:
            return None
        return iota_encode(res)

    return sid, dfun


def combine_models(m1: SymbolicModel, m2: SymbolicModel) -> SymbolicModel:
    """Union of two models with disjoint symbol sets.  The message type of
    the combination is generated by the union of the grammars: a term is
    admitted if both members admit it (the default predicate admits all)."""
    overlap = set(m1.symbols) & set(m2.symbols)
    if overlap:
        raise ModelError("symbol sets not disjoint: {}".format(sorted(overlap)))
    fns = dict(m1.destructor_fns)
    fns.update(m2.destructor_fns)
    member = None
    if m1.member is not None or m2.member is not None:
        p1 = m1.member or (lambda t: True)
        p2 = m2.member or (lambda t: True)
        member = lambda t: p1(t) and p2(t)
    return SymbolicModel(
        list(m1.symbols.values()) + list(m2.symbols.values()), fns, member
    )


# ---------------------------------------------------------------------------
# Builtin models
# ---------------------------------------------------------------------------


def _d_unstring(bit: str) -> DestructorFn:
    head = STRING0 if bit == "0" else STRING1

    def fn(t: Term) -> Optional[Term]:
        if t.head == head and len(t.args) == 1:
            return t.args[0]
        return None

    return fn


def _d_equals(x: Term, y: Term) -> Optional[Term]:
    return x if x == y else None


def _d_iszero(t: Term) -> Optional[Term]:
    s = iota_decode(t)
    if s and set(s) == {"0"}:
        return t
    return None


def bitstring_model() -> SymbolicModel:
    """The minimal bitstring model: emp/string_0/string_1 constructors,
    unstring_0/unstring_1/equals destructors."""
    syms = [
        SymbolId(EMP, 0, CONSTRUCTOR),
        SymbolId(STRING0, 1, CONSTRUCTOR),
        SymbolId(STRING1, 1, CONSTRUCTOR),
        SymbolId("unstring_0", 1, DESTRUCTOR),
        SymbolId("unstring_1", 1, DESTRUCTOR),
        SymbolId("equals", 2, DESTRUCTOR),
    ]
    fns = {
        "unstring_0": _d_unstring("0"),
        "unstring_1": _d_unstring("1"),
        "equals": _d_equals,
    }
    return SymbolicModel(syms, fns)


VOID = "void_v"
LOC = "loc_v"

# (lifted-name, arity, underlying op name) for every unop/binop/relop.
_LIFTED_UNOPS = [("d_{}".format(n), 1, n) for n in ops.UNOP_NAMES]
_LIFTED_BINOPS = [("d_{}".format(n), 2, n) for n in ops.BINOP_NAMES]
_LIFTED_RELOPS = [("d_{}".format(n), 2, n) for n in ops.RELOP_NAMES]


def lifted_op_name(op: str) -> str:
    return "d_{}".format(op)


def tag_constructor(name: str) -> str:
    """0-ary constructor naming a method id / operator / class symbol."""
    return "tag_{}".format(name)


def _unop_bits(op):
    def f(a: str) -> Optional[str]:
        if not a:
            return None
        return ops.int_to_bits(ops.apply_unop(op, ops.bits_to_int(a), len(a)), len(a))

    return f


def _binop_bits(op):
    def f(a: str, b: str) -> Optional[str]:
        if not a or len(a) != len(b):
            return None
        w = len(a)
        return ops.int_to_bits(
            ops.apply_binop(op, ops.bits_to_int(a), ops.bits_to_int(b), w), w
        )

    return f


def _relop_bits(op):
    def f(a: str, b: str) -> Optional[str]:
        if not a or len(a) != len(b):
            return None
        return "1" if ops.apply_relop(op, ops.bits_to_int(a), ops.bits_to_int(b)) else "0"

    return f


def embeddable_model(tags: Iterable[str] = (), with_ops: bool = True) -> SymbolicModel:
    """The builtin embeddable model: bitstring core plus pair/fst/snd,
    iszero, tagged void/location embeddings, one 0-ary constructor with a
    distinguishing destructor per tag name, and (optionally) one lifted
    destructor per unary/binary/relational operator.
    """
    model = bitstring_model()
    syms = [
        SymbolId("pair", 2, CONSTRUCTOR),
        SymbolId(VOID, 0, CONSTRUCTOR),
        SymbolId(LOC, 1, CONSTRUCTOR),
        SymbolId("fst", 1, DESTRUCTOR),
        SymbolId("snd", 1, DESTRUCTOR),
        SymbolId("iszero", 1, DESTRUCTOR),
        SymbolId("unloc", 1, DESTRUCTOR),
        SymbolId("is_void", 1, DESTRUCTOR),
    ]
    fns: dict[str, DestructorFn] = {
        "fst": lambda t: t.args[0] if t.head == "pair" and len(t.args) == 2 else None,
        "snd": lambda t: t.args[1] if t.head == "pair" and len(t.args) == 2 else None,
        "iszero": _d_iszero,
        "unloc": lambda t: t.args[0] if t.head == LOC and len(t.args) == 1 else None,
        "is_void": lambda t: t if t.head == VOID and not t.args else None,
    }
    for tag in sorted(set(tags)):
        cname = tag_constructor(tag)
        dname = "is_{}".format(tag)
        syms.append(SymbolId(cname, 0, CONSTRUCTOR))
        syms.append(SymbolId(dname, 1, DESTRUCTOR))
        fns[dname] = (lambda c: (lambda t: t if t.head == c and not t.args else None))(cname)
    model = model.extended(syms, fns)
    if with_ops:
        lifted_syms = []
        lifted_fns = {}
        for name, _, op in _LIFTED_UNOPS:
            sid, fn = lift_bitstring_fn(name, 1, _unop_bits(op))
            lifted_syms.append(sid)
            lifted_fns[name] = fn
        for name, _, op in _LIFTED_BINOPS:
            sid, fn = lift_bitstring_fn(name, 2, _binop_bits(op))
            lifted_syms.append(sid)
            lifted_fns[name] = fn
        for name, _, op in _LIFTED_RELOPS:
            sid, fn = lift_bitstring_fn(name, 2, _relop_bits(op))
            lifted_syms.append(sid)
            lifted_fns[name] = fn
        model = model.extended(lifted_syms, lifted_fns)
    return model


# ---------------------------------------------------------------------------
# Ground reduction traces
# ---------------------------------------------------------------------------


def reduce_trace(model: SymbolicModel, op: Op) -> list[str]:
    """Render the stepwise innermost-leftmost reduction of a ground recipe.

    Each step resolves one destructor application whose arguments are
    already plain terms.  The returned list starts with the initial
    expression and ends with the final term (or 'bot').
    """

    def is_ground_term(o: Op) -> bool:
        if o.param:
            return False
        if model.is_destructor(o.head):
            return False
        return all(is_ground_term(a) for a in o.args)

    def to_term(o: Op) -> Term:
        return Term(o.head, tuple(to_term(a) for a in o.args))

    def reduce_one(o: Op):
        # Returns (new Op or None-for-bottom, reduced?) for one step.
        if o.param:
            raise ModelError("reduce_trace needs a ground recipe")
        for i, a in enumerate(o.args):
            new_a, did = reduce_one(a)
            if did:
                if new_a is None:
                    return None, True
                return Op(o.head, o.args[:i] + (new_a,) + o.args[i + 1:]), True
        if model.is_destructor(o.head) and all(is_ground_term(a) for a in o.args):
            res = eval_symbol(model, o.head, [to_term(a) for a in o.args])
            if res is None:
                return None, True
            return term_to_op(res), True
        return o, False

    steps = [render_op(op)]
    cur: Optional[Op] = op
    while cur is not None:
        nxt, did = reduce_one(cur)
        if not did:
            break
        cur = nxt
        steps.append("bot" if cur is None else render_op(cur))
    return steps


# ---------------------------------------------------------------------------
# Parsing the term / recipe grammar
# ---------------------------------------------------------------------------


class TermSyntaxError(ValueError):
    pass


def _tokenize(text: str):
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
            continue
        if c in "(),":
            yield c, i
            i += 1
            continue
        j = i
        while j < n and (text[j].isalnum() or text[j] in "_!?.:"):
            j += 1
        if j == i:
            raise TermSyntaxError("unexpected character {!r} at {}".format(c, i))
        yield text[i:j], i
        i = j


class _Parser:
    def __init__(self, text: str):
        self.toks = list(_tokenize(text))
        self.pos = 0
        self.text = text

    def peek(self):
        return self.toks[self.pos][0] if self.pos < len(self.toks) else None

    def next(self):
        if self.pos >= len(self.toks):
            raise TermSyntaxError("unexpected end of input in {!r}".format(self.text))
        tok = self.toks[self.pos]
        self.pos += 1
        return tok[0]

    def parse_node(self, mk_leaf, mk_app):
        head = self.next()
        if head in "(),":
            raise TermSyntaxError("unexpected {!r} in {!r}".format(head, self.text))
        if self.peek() != "(":
            return mk_leaf(head)
        self.next()
        args = []
        if self.peek() != ")":
            while True:
                args.append(self.parse_node(mk_leaf, mk_app))
                tok = self.next()
                if tok == ")":
                    break
                if tok != ",":
                    raise TermSyntaxError("expected ',' or ')' in {!r}".format(self.text))
        else:
            self.next()
        return mk_app(head, args)

    def done(self):
        if self.pos != len(self.toks):
            raise TermSyntaxError("trailing input in {!r}".format(self.text))


def parse_term(text: str) -> Term:
    """Parse the canonical term grammar f(t1,...,tn) with n!x / n?x nonces."""
    p = _Parser(text)
    t = p.parse_node(lambda h: Term(h), lambda h, args: Term(h, args))
    p.done()
    return t


_PARAM_RE_HELP = "parameters are written x1, x2, ..."


def parse_op(text: str) -> Op:
    """Parse a recipe; leaves x1, x2, ... are formal parameters."""

    def leaf(h: str):
        if len(h) > 1 and h[0] == "x" and h[1:].isdigit():
            return Op.x(int(h[1:]))
        return Op(h)

    def app(h: str, args):
        if len(h) > 1 and h[0] == "x" and h[1:].isdigit():
            raise TermSyntaxError("parameter {} cannot take arguments; {}".format(h, _PARAM_RE_HELP))
        return Op(h, args)

    p = _Parser(text)
    o = p.parse_node(leaf, app)
    p.done()
    return o
