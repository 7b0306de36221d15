"""Attacker knowledge over views: recipe search, knowledge sampling, and
static equivalence of views.

A view is the attacker-observable transcript: a sequence of out events
(terms published by the program), in events (term plus the recipe that
produced it from earlier outputs), and control events (out-/in-metadata
bitstrings).

The full knowledge function maps every recipe to top/bottom; it is infinite,
so all operations here sample it up to a recipe depth with a fixed pool of
attacker nonces.  The bound is a completeness knob only: everything a
bounded query reports is sound.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .terms import (
    Op,
    SymbolicModel,
    Term,
    att_nonce,
    eval_op,
    eval_symbol,
    parse_op,
    parse_term,
    render,
    render_op,
    term_to_op,
)

ATTACKER_NONCE_POOL = (att_nonce("a0"), att_nonce("a1"))


@dataclass(frozen=True)
class OutEvent:
    """Published terms; `tag` names the operation or malicious function the
    event came from.  Tags take part in the same-structure condition of
    view equivalence but are not attacker-derivable terms."""

    terms: tuple[Term, ...]
    tag: str = ""


@dataclass(frozen=True)
class InEvent:
    term: Term
    recipe: Op


@dataclass(frozen=True)
class ControlEvent:
    out_meta: str
    in_meta: str


View = tuple  # of OutEvent | InEvent | ControlEvent


def out_terms(view: View) -> list[Term]:
    """Out(V): all terms of out events, in order."""
    terms: list[Term] = []
    for ev in view:
        if isinstance(ev, OutEvent):
            terms.extend(ev.terms)
    return terms


def out_meta(view: View) -> list[str]:
    return [ev.out_meta for ev in view if isinstance(ev, ControlEvent)]


def event_kinds(view: View) -> list[tuple]:
    kinds = []
    for ev in view:
        if isinstance(ev, OutEvent):
            kinds.append(("out", ev.tag))
        elif isinstance(ev, InEvent):
            kinds.append(("in", ""))
        else:
            kinds.append(("control", ""))
    return kinds


def check_view(model: SymbolicModel, view: View) -> None:
    """Assert the view invariant: every in event's recipe re-evaluates to
    the carried term against the preceding out terms."""
    for i, ev in enumerate(view):
        if isinstance(ev, InEvent):
            prior = out_terms(view[:i])
            got = eval_op(model, ev.recipe, prior)
            if got != ev.term:
                raise ValueError(
                    "in event {} carries {} but its recipe yields {}".format(
                        i, render(ev.term), "bot" if got is None else render(got)
                    )
                )


def view_to_json(view: View) -> str:
    def enc(ev):
        if isinstance(ev, OutEvent):
            return {"kind": "out", "tag": ev.tag, "terms": [render(t) for t in ev.terms]}
        if isinstance(ev, InEvent):
            return {"kind": "in", "term": render(ev.term), "recipe": render_op(ev.recipe)}
        return {"kind": "control", "out_meta": ev.out_meta, "in_meta": ev.in_meta}

    return json.dumps([enc(ev) for ev in view])


def view_from_json(text: str) -> View:
    events = []
    for obj in json.loads(text):
        kind = obj["kind"]
        if kind == "out":
            events.append(OutEvent(tuple(parse_term(t) for t in obj["terms"]), obj.get("tag", "")))
        elif kind == "in":
            events.append(InEvent(parse_term(obj["term"]), parse_op(obj["recipe"])))
        else:
            events.append(ControlEvent(obj["out_meta"], obj["in_meta"]))
    return tuple(events)


# ---------------------------------------------------------------------------
# Recipe enumeration
# ---------------------------------------------------------------------------


def _leaf_ops(model: SymbolicModel, n_params: int, nonce_pool: Sequence[Term]) -> list[Op]:
    leaves = [Op.x(i + 1) for i in range(n_params)]
    leaves += [term_to_op(n) for n in nonce_pool]
    leaves += [Op(c) for c in model.constructor_names() if model.arity(c) == 0]
    return leaves


def enumerate_recipes(
    model: SymbolicModel,
    depth: int,
    n_params: int,
    nonce_pool: Sequence[Term] = ATTACKER_NONCE_POOL,
    limit: Optional[int] = None,
):
    """All recipes of depth <= depth over the model's symbols, parameters
    x1..x{n_params}, and the given attacker-nonce pool, in (depth, symbol,
    argument) order.  Explodes combinatorially; intended for small models
    and depths.  A limit guards against runaway enumeration."""
    by_depth: list[list[Op]] = [list(_leaf_ops(model, n_params, nonce_pool))]
    count = 0
    for o in by_depth[0]:
        count += 1
        if limit is not None and count > limit:
            raise RuntimeError("recipe enumeration exceeded {}".format(limit))
        yield o
    symbols = sorted(
        (s for s in model.symbols.values() if s.arity > 0 and s.kind in ("constructor", "destructor")),
        key=lambda s: s.name,
    )
    for d in range(1, depth + 1):
        layer: list[Op] = []
        pool = [o for lvl in by_depth for o in lvl]
        prev = set(by_depth[-1])
        for sid in symbols:
            # At least one child from the previous layer so depth is exact.
            for args in itertools.product(pool, repeat=sid.arity):
                if not any(a in prev for a in args):
                    continue
                o = Op(sid.name, args)
                layer.append(o)
                count += 1
                if limit is not None and count > limit:
                    raise RuntimeError("recipe enumeration exceeded {}".format(limit))
                yield o
        by_depth.append(layer)


# ---------------------------------------------------------------------------
# Deducibility: bounded recipe search
# ---------------------------------------------------------------------------


def deducible(
    model: SymbolicModel,
    view: View,
    target: Term,
    recipe_depth: int,
    nonce_pool: Sequence[Term] = ATTACKER_NONCE_POOL,
) -> Optional[Op]:
    """Find a recipe O with eval_op(O, Out(view)) = target and depth <=
    recipe_depth, or None if none exists within the bound.

    Layered search with memoized subterm evaluation: recipes are explored
    in (depth, symbol, argument) order and deduplicated by their value, so
    the returned witness is the first recipe in that order deriving a
    *new* value equal to the target.  Deduplication is sound and complete
    for the bound: evaluation is compositional, so replacing a subrecipe
    by an earlier one with the same value and no greater depth preserves
    the result.
    """
    outs = out_terms(view)
    table = derivable_values(model, outs, recipe_depth, nonce_pool)
    hit = table.get(target)
    if hit is None:
        return None
    recipe = hit
    assert eval_op(model, recipe, outs) == target
    return recipe


class _TableFull(Exception):
    pass


def derivable_values(
    model: SymbolicModel,
    outs: Sequence[Term],
    depth: int,
    nonce_pool: Sequence[Term] = ATTACKER_NONCE_POOL,
    limit: int = 200_000,
    on_limit: str = "raise",
) -> dict[Term, Op]:
    """Map every term derivable within the depth bound to the first recipe
    (in canonical search order) producing it.  Exceeding `limit` raises by
    default; on_limit="stop" instead returns the canonical prefix."""
    table: dict[Term, Op] = {}
    frontier: list[Term] = []

    def add(value: Term, recipe: Op):
        if value not in table:
            if len(table) >= limit:
                if on_limit == "stop":
                    raise _TableFull()
                raise RuntimeError("derivable-value table exceeded {}".format(limit))
            table[value] = recipe
            frontier.append(value)

    try:
        for i, t in enumerate(outs):
            add(t, Op.x(i + 1))
        for n in nonce_pool:
            add(n, term_to_op(n))
        for c in model.constructor_names():
            if model.arity(c) == 0:
                v = eval_symbol(model, c, [])
                if v is not None:
                    add(v, Op(c))
        symbols = sorted(
            (s for s in model.symbols.values()
             if s.arity > 0 and s.kind in ("constructor", "destructor")),
            key=lambda s: s.name,
        )
        known: list[Term] = []
        for _ in range(depth):
            new_from = len(known)
            known.extend(frontier)
            frontier = []
            fresh = set(known[new_from:])
            if not fresh:
                break
            for sid in symbols:
                for args in itertools.product(known, repeat=sid.arity):
                    if not any(a in fresh for a in args):
                        continue
                    v = eval_symbol(model, sid.name, list(args))
                    if v is not None:
                        add(v, Op(sid.name, tuple(table[a] for a in args)))
    except _TableFull:
        pass
    return table


def choice_set(
    model: SymbolicModel,
    outs: Sequence[Term],
    depth: int,
    nonce_pool: Sequence[Term] = ATTACKER_NONCE_POOL,
    max_choices: int = 64,
) -> list[tuple[Term, Op]]:
    """The finite adversary-input pool: the first max_choices derivable
    (term, recipe) pairs in canonical order.  Prior outputs and attacker
    nonces come first, so the cap trims only deep synthesized terms; it is
    the same completeness-only knob as the recipe-depth bound."""
    table = derivable_values(model, outs, depth, nonce_pool,
                             limit=max_choices, on_limit="stop")
    return list(table.items())


# ---------------------------------------------------------------------------
# Knowledge sampling and view equivalence
# ---------------------------------------------------------------------------


@dataclass
class KnowledgeSample:
    """The full knowledge function restricted to a depth-bounded recipe set:
    verdict top (recipe evaluates) or bottom (undefined) per recipe."""

    depth: int
    verdicts: dict[Op, bool]

    def __eq__(self, other):
        return isinstance(other, KnowledgeSample) and self.verdicts == other.verdicts


def knowledge(
    model: SymbolicModel,
    view: View,
    recipe_depth: int,
    nonce_pool: Sequence[Term] = ATTACKER_NONCE_POOL,
    limit: int = 200_000,
) -> KnowledgeSample:
    """Evaluate every recipe up to the depth bound against Out(view)."""
    outs = out_terms(view)
    verdicts: dict[Op, bool] = {}
    for o in enumerate_recipes(model, recipe_depth, len(outs), nonce_pool, limit=limit):
        verdicts[o] = eval_op(model, o, outs) is not None
    return KnowledgeSample(recipe_depth, verdicts)


@dataclass
class EquivVerdict:
    equivalent: bool
    depth: int
    reason: str = ""
    witness: Optional[Op] = None

    def __bool__(self):
        return self.equivalent


def views_equivalent(
    model: SymbolicModel,
    v1: View,
    v2: View,
    recipe_depth: int,
    nonce_pool: Sequence[Term] = ATTACKER_NONCE_POOL,
) -> EquivVerdict:
    """Static equivalence of two views at a recipe-depth bound.

    Checks (i) same structure, (ii) same out-metadata, (iii) same knowledge
    up to the depth bound.  For (iii) a distinguishing recipe is searched
    in destructor-root normal form: constructors are total on the message
    type, so a minimal recipe whose verdict differs between the views has
    a destructor at the root and arguments that evaluate on both sides.
    On failure the verdict carries the failing condition and, for (iii),
    the distinguishing recipe.
    """
    k1, k2 = event_kinds(v1), event_kinds(v2)
    if k1 != k2:
        return EquivVerdict(False, recipe_depth, "structure: {} vs {}".format(k1, k2))
    if out_meta(v1) != out_meta(v2):
        return EquivVerdict(
            False, recipe_depth,
            "out-metadata: {} vs {}".format(out_meta(v1), out_meta(v2)),
        )
    if len(out_terms(v1)) != len(out_terms(v2)):
        # The knowledge functions have different arities.
        return EquivVerdict(False, recipe_depth, "knowledge: output arity differs")
    w = distinguishing_recipe(model, out_terms(v1), out_terms(v2), recipe_depth, nonce_pool)
    if w is not None:
        return EquivVerdict(False, recipe_depth, "knowledge", witness=w)
    return EquivVerdict(True, recipe_depth)


def distinguishing_recipe(
    model: SymbolicModel,
    outs1: Sequence[Term],
    outs2: Sequence[Term],
    depth: int,
    nonce_pool: Sequence[Term] = ATTACKER_NONCE_POOL,
    closure_limit: int = 20_000,
) -> Optional[Op]:
    """Search for a recipe whose verdict differs on the two output lists.

    The closure tracks pairs (value on side 1, value on side 2) reachable
    by a common destructor recipe with both sides defined; destructor
    applications over the closure are tested for one-sided failure.  A
    minimal distinguishing recipe is destructor-rooted (constructors are
    total on the message type, so a constructor root would contain a
    smaller distinguisher), and constructor material matters only through
    equality tests, handled by targeted synthesis probes: a constructor
    recipe rebuilding one side of an asymmetric pair from closure material
    while evaluating differently on the other side is an
    equals-distinguisher.  Completeness is relative to the depth bound and
    this argument shape (destructor-closure arguments plus rebuilt
    equality witnesses); the bound is reported in every verdict.
    """
    if len(outs1) != len(outs2):
        raise ValueError("output lists must have equal length")
    n = len(outs1)

    # pair -> (recipe, recipe depth); insertion order is search order.
    closure: dict[tuple[Term, Term], tuple[Op, int]] = {}
    order: list[tuple[Term, Term]] = []

    def add(p1: Term, p2: Term, recipe: Op, d: int):
        key = (p1, p2)
        if key not in closure:
            closure[key] = (recipe, d)
            order.append(key)
            if len(closure) > closure_limit:
                raise RuntimeError("equivalence closure exceeded {}".format(closure_limit))

    for i in range(n):
        add(outs1[i], outs2[i], Op.x(i + 1), 0)
    for nn in nonce_pool:
        add(nn, nn, term_to_op(nn), 0)
    for c in model.constructor_names():
        if model.arity(c) == 0:
            t = Term(c)
            add(t, t, Op(c), 0)

    destructors = sorted(model.destructor_names())

    def synth_probe(target: Term, side: int, budget: int):
        """Recipes over the closure and constructors that evaluate to
        `target` on `side`, paired with their value on the other side.
        Bounded recursion; returns a few candidates at most."""
        results = []
        for (a1, a2), (r, d) in closure.items():
            mine, other = (a1, a2) if side == 1 else (a2, a1)
            if mine == target:
                results.append((r, d, other))
        if budget > 0 and target.args and model.is_constructor(target.head):
            child_cands = [synth_probe(c, side, budget - 1) for c in target.args]
            if all(child_cands):
                for combo in itertools.product(*(cc[:3] for cc in child_cands)):
                    rec = Op(target.head, tuple(c[0] for c in combo))
                    d = 1 + max(c[1] for c in combo)
                    other_val = eval_symbol(model, target.head, [c[2] for c in combo])
                    if other_val is not None:
                        results.append((rec, d, other_val))
                    if len(results) >= 6:
                        break
        return results

    frontier_start = 0
    for layer in range(1, depth + 1):
        snapshot = list(order)
        fresh = set(range(frontier_start, len(snapshot)))
        frontier_start = len(snapshot)
        new_pairs: list[tuple[Term, Term, Op, int]] = []
        for dname in destructors:
            ar = model.arity(dname)
            for idxs in itertools.product(range(len(snapshot)), repeat=ar):
                if layer > 1 and not any(i in fresh for i in idxs):
                    continue
                keys = [snapshot[i] for i in idxs]
                recipes = [closure[k][0] for k in keys]
                dmax = max(closure[k][1] for k in keys)
                if dmax + 1 > depth:
                    continue
                v1 = eval_symbol(model, dname, [k[0] for k in keys])
                v2 = eval_symbol(model, dname, [k[1] for k in keys])
                if (v1 is None) != (v2 is None):
                    return Op(dname, tuple(recipes))
                if v1 is not None and v2 is not None:
                    new_pairs.append((v1, v2, Op(dname, tuple(recipes)), dmax + 1))
        # Equality synthesis probes: rebuild one side of an asymmetric pair.
        if "equals" in model.destructor_fns:
            for (a1, a2) in snapshot:
                if a1 == a2:
                    continue
                base = closure[(a1, a2)]
                for side, mine, other in ((1, a1, a2), (2, a2, a1)):
                    for rec, d, other_val in synth_probe(mine, side, depth - 1):
                        if max(base[1], d) + 1 > depth:
                            continue
                        if other_val != other:
                            args = (base[0], rec) if side == 1 else (rec, base[0])
                            return Op("equals", args)
        for v1, v2, rec, d in new_pairs:
            add(v1, v2, rec, d)
    return None
