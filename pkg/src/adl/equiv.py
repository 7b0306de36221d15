"""Bounded symbolic trace equivalence of two programs and Monte-Carlo
termination-insensitive advantage estimation for concrete executions.

An attacker strategy is the sequence of recipes supplied at input slots;
adversary-decided branches are not part of the strategy, so one strategy
induces a *set* of views per program.  Two programs are equivalent up to
the budgets when, for every strategy within the interaction budget, the
two view sets match under the lifted static-equivalence relation (every
view on one side has an equivalent view on the other, and vice versa).
Verdicts always carry their budgets: "equivalent" means
equivalent-up-to-budget.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from .concrete_vm import AdvOut, AttackerHook, Rng, Vm, run
from .deduction import (
    ATTACKER_NONCE_POOL,
    EquivVerdict,
    choice_set,
    out_terms,
    views_equivalent,
)
from .symbolic_vm import SymFinal, SymState, SymStuck, SymVm
from .terms import Op, render_op


@dataclass
class Strategy:
    """Replayable adversary script: in-slot recipes with the branch bits
    needed to reproduce one specific execution."""

    moves: tuple  # of ("in", Op) | ("branch", int)

    def recipes(self) -> tuple:
        return tuple(m[1] for m in self.moves if m[0] == "in")

    def render(self) -> list:
        return [
            {"kind": k, "recipe": render_op(v)} if k == "in" else {"kind": k, "branch": v}
            for k, v in self.moves
        ]


@dataclass
class Verdict:
    status: str                      # equivalent | inequivalent | bound-exhausted
    interaction_budget: int
    recipe_depth: int
    reason: str = ""
    witness: Optional[Strategy] = None
    witness_recipe: Optional[Op] = None

    @property
    def equivalent(self) -> bool:
        return self.status == "equivalent"


@dataclass
class _Run:
    state: object     # SymState | SymFinal | SymStuck
    moves: tuple      # full move script so far


class _Budgets:
    def __init__(self, choice_depth: int, nonce_pool):
        self.choice_depth = choice_depth
        self.nonce_pool = nonce_pool


def _advance(vm: SymVm, run_: _Run) -> _Run:
    """Run until a pending input slot, a branch point, or a terminal."""
    state = run_.state
    moves = run_.moves
    while True:
        if isinstance(state, (SymFinal, SymStuck)):
            return _Run(state, moves)
        if state.pending is not None:
            return _Run(state, moves)
        succs = vm.sym_step(state)
        if len(succs) > 1:
            return _Run(state, moves)
        state = succs[0].state


def _expand_branches(vm: SymVm, run_: _Run) -> list:
    """All branch-resolutions of a run until every leaf is pending or
    terminal (branch moves recorded for replay)."""
    leaves = []
    stack = [_advance(vm, run_)]
    while stack:
        r = stack.pop()
        if isinstance(r.state, (SymFinal, SymStuck)) or r.state.pending is not None:
            leaves.append(r)
            continue
        succs = vm.sym_step(r.state)
        for i, s in enumerate(succs):
            stack.append(_advance(vm, _Run(s.state, r.moves + (("branch", i),))))
    return leaves


def _feed(vm: SymVm, run_: _Run, recipe: Op) -> Optional[_Run]:
    """Consume one pending slot with a recipe; None if it does not apply."""
    state = run_.state
    from .terms import eval_op
    term = eval_op(vm.model, recipe, out_terms(state.view))
    if term is None:
        return None
    succ = vm.sym_step(state, (term, recipe))[0]
    return _advance(vm, _Run(succ.state, run_.moves + (("in", recipe),)))


def sym_equiv(
    vm1: SymVm,
    s1: SymState,
    vm2: SymVm,
    s2: SymState,
    interaction_budget: int,
    recipe_depth: int,
    choice_depth: Optional[int] = None,
    nonce_pool=ATTACKER_NONCE_POOL,
    max_runs: int = 50_000,
    max_choices: int = 16,
) -> Verdict:
    """Enumerate strategies within the budgets and compare the induced view
    sets; the first failing strategy (in enumeration order) is the witness.
    In-slot recipes come from the capped canonical choice set (prior
    outputs, attacker nonces, then synthesized terms); the knowledge
    comparison runs at the full recipe depth.
    """
    if choice_depth is None:
        choice_depth = min(recipe_depth, 1)

    counter = {"runs": 0}

    def note_runs(n):
        counter["runs"] += n
        if counter["runs"] > max_runs:
            raise _Exhausted()

    def candidates(runs1, runs2) -> list:
        seen = {}
        for r in runs1 + runs2:
            if isinstance(r.state, (SymFinal, SymStuck)) or r.state.pending is None:
                continue
            vm = vm1 if r in runs1 else vm2
            for _term, recipe in choice_set(vm.model, out_terms(r.state.view),
                                            choice_depth, nonce_pool, max_choices):
                seen.setdefault(recipe, None)
        return list(seen)

    def compare_terminal(runs1, runs2, strategy_moves) -> Optional[Verdict]:
        views1 = [r for r in runs1 if isinstance(r.state, (SymFinal, SymStuck))]
        views2 = [r for r in runs2 if isinstance(r.state, (SymFinal, SymStuck))]
        pending1 = [r for r in runs1 if not isinstance(r.state, (SymFinal, SymStuck))]
        pending2 = [r for r in runs2 if not isinstance(r.state, (SymFinal, SymStuck))]
        # A side still awaiting input under an exhausted strategy has no view
        # for this strategy; both sides must then agree on having none.
        if bool(views1) != bool(views2):
            witness = views1[0] if views1 else views2[0]
            return Verdict(
                "inequivalent", interaction_budget, recipe_depth,
                reason="structure: one side has no completed view for this strategy",
                witness=Strategy(witness.moves),
            )
        for side, mine, theirs, my_vm, their_vm in (
            (1, views1, views2, vm1, vm2),
            (2, views2, views1, vm2, vm1),
        ):
            for r in mine:
                best: Optional[EquivVerdict] = None
                matched = False
                for q in theirs:
                    v = views_equivalent(
                        my_vm.model, r.state.view, q.state.view, recipe_depth, nonce_pool
                    )
                    if v.equivalent:
                        matched = True
                        break
                    if best is None:
                        best = v
                if not matched:
                    return Verdict(
                        "inequivalent", interaction_budget, recipe_depth,
                        reason="no equivalent view on the other side ({})".format(
                            best.reason if best is not None else "empty set"),
                        witness=Strategy(r.moves),
                        witness_recipe=best.witness if best is not None else None,
                    )
        _ = pending1, pending2
        return None

    def explore(runs1, runs2, budget, strategy_moves) -> Optional[Verdict]:
        note_runs(len(runs1) + len(runs2))
        bad = compare_terminal(runs1, runs2, strategy_moves)
        if bad is not None:
            return bad
        if budget <= 0:
            return None
        for recipe in candidates(runs1, runs2):
            next1 = _consume(vm1, runs1, recipe)
            next2 = _consume(vm2, runs2, recipe)
            if not next1 and not next2:
                continue
            bad = explore(next1, next2, budget - 1, strategy_moves + (recipe,))
            if bad is not None:
                return bad
        return None

    def _consume(vm, runs, recipe):
        out = []
        for r in runs:
            if isinstance(r.state, (SymFinal, SymStuck)) or r.state.pending is None:
                continue
            fed = _feed(vm, r, recipe)
            if fed is not None:
                out.extend(_expand_branches(vm, fed))
        return out

    try:
        base1 = _expand_branches(vm1, _Run(s1.copy(), ()))
        base2 = _expand_branches(vm2, _Run(s2.copy(), ()))
        bad = explore(base1, base2, interaction_budget, ())
    except _Exhausted:
        return Verdict("bound-exhausted", interaction_budget, recipe_depth,
                       reason="run limit {} exceeded".format(max_runs))
    if bad is not None:
        return bad
    return Verdict("equivalent", interaction_budget, recipe_depth)


class _Exhausted(Exception):
    pass


# ---------------------------------------------------------------------------
# tic advantage estimation
# ---------------------------------------------------------------------------


def wilson_interval(successes: int, n: int, z: float = 1.96) -> tuple:
    if n == 0:
        return (0.0, 1.0)
    p = successes / n
    denom = 1 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return (max(0.0, center - half), min(1.0, center + half))


@dataclass
class TicEstimate:
    advantage: float
    ci: tuple            # conservative interval on the advantage
    pair: tuple          # (a, b) achieving the estimate
    trials: int
    counts1: dict
    counts2: dict


def tic_estimate(
    vm1: Vm,
    make_s1: Callable,
    vm2: Vm,
    make_s2: Callable,
    attacker_factory: Callable[[], AttackerHook],
    step_budget: int,
    trials: int,
    seed: int = 0,
    tokens: tuple = ("0", "1"),
) -> TicEstimate:
    """Estimate max over output bits a != b of Pr1[a] + Pr2[b] - 1 by
    Monte-Carlo, with Wilson intervals combined conservatively."""

    def sample(vm, make_s, base_seed):
        counts: dict = {}
        for t in range(trials):
            rng = Rng(base_seed + t)
            res = run(vm, make_s(), rng, attacker_factory(), step_budget)
            tok = res.final.token if isinstance(res.final, AdvOut) else None
            counts[tok] = counts.get(tok, 0) + 1
        return counts

    counts1 = sample(vm1, make_s1, seed)
    counts2 = sample(vm2, make_s2, seed + 10_000_019)
    best = None
    for a in tokens:
        for b in tokens:
            if a == b:
                continue
            p1 = counts1.get(a, 0) / trials
            p2 = counts2.get(b, 0) / trials
            adv = p1 + p2 - 1
            lo1, hi1 = wilson_interval(counts1.get(a, 0), trials)
            lo2, hi2 = wilson_interval(counts2.get(b, 0), trials)
            ci = (lo1 + lo2 - 1, hi1 + hi2 - 1)
            if best is None or adv > best.advantage:
                best = TicEstimate(adv, ci, (a, b), trials, counts1, counts2)
    assert best is not None
    return best
