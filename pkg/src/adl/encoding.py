"""Embedding of machine values and heaps into terms and bitstrings.

Numbers embed as their w-bit two's-complement image under the bitstring
encoding; locations and void are tagged so all values stay distinguishable;
method/operator names embed as dedicated 0-ary tag constructors.  A heap
slice embeds as an ordered association list of (location, cell) pairs,
objects as class tag plus ordered field list, arrays as length plus
ordered cell list.

The computational counterparts inject the same values into bitstrings with
matching prefixes, so a term built here and evaluated by the toy
implementation yields exactly the bitstring encoding of the value.
"""

from __future__ import annotations

from typing import Optional

from . import ops
from .concrete_vm import VOID, Arr, Loc, Num, Obj, Void
from .terms import (
    CONSTRUCTOR,
    LOC,
    VOID as VOID_CTOR,
    SymbolId,
    SymbolicModel,
    Term,
    iota_decode,
    iota_encode,
    iota_int,
    tag_constructor,
)

HNIL, HCONS = "hnil", "hcons"
OBJ_T, ARR_T = "obj_t", "arr_t"
FNIL, FCONS = "fnil", "fcons"

HEAP_CONSTRUCTORS = [
    SymbolId(HNIL, 0, CONSTRUCTOR),
    SymbolId(HCONS, 3, CONSTRUCTOR),
    SymbolId(OBJ_T, 2, CONSTRUCTOR),
    SymbolId(ARR_T, 2, CONSTRUCTOR),
    SymbolId(FNIL, 0, CONSTRUCTOR),
    SymbolId(FCONS, 3, CONSTRUCTOR),
]


def with_heap_constructors(model: SymbolicModel) -> SymbolicModel:
    missing = [s for s in HEAP_CONSTRUCTORS if s.name not in model.symbols]
    return model.extended(missing, {}) if missing else model


def nat_bits(n: int) -> str:
    return format(n, "b")


def value_hat(v, width: int) -> Term:
    """Term image of a machine value (terms pass through unchanged)."""
    if isinstance(v, Term):
        return v
    if isinstance(v, Num):
        return iota_int(v.value, width)
    if isinstance(v, Loc):
        return Term(LOC, (iota_encode(nat_bits(v.loc)),))
    if isinstance(v, Void):
        return Term(VOID_CTOR)
    raise TypeError("not a value: {!r}".format(v))


def value_unhat(t: Term, width: int):
    """Machine value of a term image where one exists; None otherwise."""
    if t.head == VOID_CTOR and not t.args:
        return VOID
    if t.head == LOC and len(t.args) == 1:
        s = iota_decode(t.args[0])
        return Loc(int(s, 2)) if s else None
    s = iota_decode(t)
    if s is not None and len(s) == width:
        return Num(ops.bits_to_int(s))
    return None


def tag_term(name: str) -> Term:
    return Term(tag_constructor(name))


def heap_hat(heap: dict, width: int) -> Term:
    """Ordered association-list term for a heap (slice)."""
    t = Term(HNIL)
    for l in sorted(heap, reverse=True):
        cell = heap[l]
        if isinstance(cell, Obj):
            fl = Term(FNIL)
            for f in sorted(cell.fields, reverse=True):
                fl = Term(FCONS, (tag_term(f), value_hat(cell.fields[f], width), fl))
            enc = Term(OBJ_T, (tag_term(cell.cls), fl))
        else:
            cl = Term(FNIL)
            for i in sorted(cell.cells, reverse=True):
                cl = Term(FCONS, (iota_encode(nat_bits(i)), value_hat(cell.cells[i], width), cl))
            enc = Term(ARR_T, (iota_int(cell.length, width), cl))
        t = Term(HCONS, (iota_encode(nat_bits(l)), enc, t))
    return t


def heap_unhat(t: Term, width: int) -> Optional[dict]:
    """Inverse of heap_hat; None if the term does not follow the convention.

    Cell values decode back to machine values where possible and stay terms
    otherwise (symbolic heap slices may carry opaque terms).
    """
    heap: dict = {}
    while True:
        if t.head == HNIL and not t.args:
            return heap
        if t.head != HCONS or len(t.args) != 3:
            return None
        lbits = iota_decode(t.args[0])
        if lbits is None:
            return None
        loc = int(lbits, 2)
        enc = t.args[1]
        if enc.head == OBJ_T and len(enc.args) == 2:
            cls = _untag(enc.args[0])
            fields = {}
            fl = enc.args[1]
            while fl.head == FCONS and len(fl.args) == 3:
                fname = _untag(fl.args[0])
                if fname is None:
                    return None
                fields[fname] = _cell_value(fl.args[1], width)
                fl = fl.args[2]
            if fl.head != FNIL or cls is None:
                return None
            heap[loc] = Obj(cls, fields)
        elif enc.head == ARR_T and len(enc.args) == 2:
            ln = iota_decode(enc.args[0])
            if ln is None:
                return None
            cells = {}
            cl = enc.args[1]
            while cl.head == FCONS and len(cl.args) == 3:
                ib = iota_decode(cl.args[0])
                if ib is None:
                    return None
                cells[int(ib, 2)] = _cell_value(cl.args[1], width)
                cl = cl.args[2]
            if cl.head != FNIL:
                return None
            heap[loc] = Arr(ops.bits_to_int(ln) if ln else 0, cells)
        else:
            return None
        t = t.args[2]


def _untag(t: Term) -> Optional[str]:
    if not t.args and t.head.startswith("tag_"):
        return t.head[len("tag_"):]
    return None


def _cell_value(t: Term, width: int):
    v = value_unhat(t, width)
    return v if v is not None else t


# ---------------------------------------------------------------------------
# Bitstring encodings (the computational side of the same injection)
# ---------------------------------------------------------------------------

_VOID_BITS = "01"
_LOC_PREFIX = "10"
_TAG_PREFIX = "11"


def value_bits(v, width: int) -> str:
    if isinstance(v, Num):
        return ops.int_to_bits(v.value, width)
    if isinstance(v, Loc):
        return _LOC_PREFIX + nat_bits(v.loc)
    if isinstance(v, Void):
        return _VOID_BITS
    raise TypeError("not a value: {!r}".format(v))


def tag_bits(name: str) -> str:
    return _TAG_PREFIX + "".join(format(b, "08b") for b in name.encode())
