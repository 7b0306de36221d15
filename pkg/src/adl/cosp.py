"""Protocol trees: the lazy embedding of a split-state program into a tree
of computation/input/output/control nodes, and symbolic and computational
executions of such trees.

Node identifiers are (position, payload): the position is the edge-index
path from the root, the payload embeds the machine state at resumption
points (input nodes and the yes side of library computation nodes).
Registers and heap cells of the embedded machine may hold positions in
place of values; a position is resolved to a node reference when its value
is published.

Tree shapes produced per interactive rule:

    adversary op    operand chain -> Output -> Input(resumed state)
    adversary test  operand chain -> Output -> Input() -> Comp(iszero, input)
                    with yes = fall-through branch, no = jump branch
    library call    per-argument chains -> Comp(op, refs; resumed state)
    finality        finalCall chain -> Output -> Input -> end

Control nodes only arise from honest-side nondeterminism, which the
embedded semantics does not exhibit; they are still supported by the
walkers for synthetic trees.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from .bytecode import INVOKE_KIND, Program
from .concrete_vm import (
    RES_LO,
    RES_UP,
    VOID,
    Arr,
    ConcreteState,
    Loc,
    MalCall,
    Next,
    Num,
    Obj,
    RandChoice,
    Returned,
    Stuck,
    Vm,
    freeze_heap,
    heap_slice,
)
from .crypto_api import FreshNonces, Impl, LibSpec, impl_eval_op, resolve
from .deduction import InEvent, OutEvent, ControlEvent, out_terms
from .encoding import nat_bits, value_hat
from .symbolic_vm import FINAL_CALL
from .terms import Op, SymbolicModel, Term, eval_op, eval_symbol, iota_encode, render, tag_constructor

Pos = tuple


@dataclass
class Node:
    pos: Pos
    kind: str                  # comp | input | output | control | end
    sym: Optional[str] = None  # comp: constructor/destructor/nonce name
    refs: tuple = ()           # positions of referenced nodes
    payload: object = None     # resumption state (input / comp yes side)
    out_meta: str = ""         # control nodes
    edge_labels: tuple = ()    # control nodes

    def edges(self) -> tuple:
        if self.kind == "comp":
            return ("yes", "no")
        if self.kind in ("input", "output"):
            return ("",)
        if self.kind == "control":
            return self.edge_labels
        return ()


class EmbeddingError(ValueError):
    pass


@dataclass(frozen=True)
class PosVal:
    """A register/heap value standing for the node at `pos`; cls is "b" if
    the producing operation yields a bitstring image, else "c"."""

    pos: Pos
    cls: str


def pos_class(v) -> str:
    if isinstance(v, PosVal):
        return v.cls.replace("b", "Db").replace("c", "Dc")
    return "D"


# -- hat structures: terms whose leaves may reference nodes -----------------


def _hat_of_value(v, width: int):
    if isinstance(v, PosVal):
        return ("ref", v.pos)
    return _hat_of_term(value_hat(v, width))


def _hat_of_term(t: Term):
    return ("term", t.head, tuple(_hat_of_term(a) for a in t.args))


def _hat_heap(heap: dict, width: int):
    node = _hat_of_term(Term("hnil"))
    for l in sorted(heap, reverse=True):
        cell = heap[l]
        if isinstance(cell, Obj):
            fl = _hat_of_term(Term("fnil"))
            for f in sorted(cell.fields, reverse=True):
                fl = ("term", "fcons", (
                    _hat_of_term(Term(tag_constructor(f))),
                    _hat_of_value(cell.fields[f], width),
                    fl,
                ))
            enc = ("term", "obj_t", (_hat_of_term(Term(tag_constructor(cell.cls))), fl))
        else:
            cl = _hat_of_term(Term("fnil"))
            for i in sorted(cell.cells, reverse=True):
                cl = ("term", "fcons", (
                    _hat_of_term(iota_encode(nat_bits(i))),
                    _hat_of_value(cell.cells[i], width),
                    cl,
                ))
            from .terms import iota_int
            enc = ("term", "arr_t", (_hat_of_term(iota_int(cell.length, width)), cl))
        node = ("term", "hcons", (_hat_of_term(iota_encode(nat_bits(l))), enc, node))
    return node


def _hat_list(items):
    """Pair-combine a nonempty list of hat structures, right-nested."""
    node = items[-1]
    for it in reversed(items[:-1]):
        node = ("term", "pair", (it, node))
    return node


class ProtocolTree:
    """Lazily expanded protocol tree for one embedded program.

    node(pos) materializes and returns the node at a position; children
    are reached through node positions pos + (edge index,).
    """

    def __init__(self, machine: "EmbedMachine"):
        self.machine = machine
        self.nodes: dict[Pos, Node] = {}
        self._pending: dict[Pos, object] = {}  # pos -> state to expand from
        self._expand_segment((), machine.initial_state())

    def node(self, pos: Pos) -> Optional[Node]:
        self._ensure(pos)
        return self.nodes.get(pos)

    def _ensure(self, pos: Pos) -> None:
        if pos in self.nodes:
            return
        # Materialize along the prefix; expansion is per pending segment.
        for cut in range(len(pos) + 1):
            prefix = pos[:cut]
            if prefix in self._pending:
                state = self._pending.pop(prefix)
                self._expand_segment(prefix, state)
            if prefix not in self.nodes and cut < len(pos):
                return

    def _add(self, node: Node) -> None:
        for ref in node.refs:
            self._check_ref(node.pos, ref)
        self.nodes[node.pos] = node

    def _check_ref(self, pos: Pos, ref: Pos) -> None:
        if ref != pos[: len(ref)] or ref == pos:
            raise EmbeddingError("reference {} not on the root path of {}".format(ref, pos))
        refd = self.nodes.get(ref)
        if refd is None or refd.kind not in ("comp", "input"):
            raise EmbeddingError("reference {} is not a computation/input node".format(ref))
        if refd.kind == "comp" and pos[len(ref)] != 0:
            raise EmbeddingError("reference {} not through its yes-edge".format(ref))

    def _expand_segment(self, pos: Pos, state) -> None:
        """Run the embedded machine deterministically from `state` and emit
        one segment of nodes starting at `pos`.  A None state marks a dead
        edge (the no-side of a library computation)."""
        if state is None:
            self._add(Node(pos, "end", sym="undefined"))
            return
        for node, continuations in self.machine.segment(pos, state):
            self._add(node)
            for child_pos, child_state in continuations:
                self._pending[child_pos] = child_state


class EmbedMachine:
    """The over-approximated honest semantics with positions for opaque
    values; produces tree segments."""

    def __init__(self, program: Program, width: int, model: SymbolicModel,
                 libspec: LibSpec, entry: str = "main", args: Sequence = ()):
        self.program = program
        self.width = width
        self.model = model
        self.libspec = libspec
        self.vm = Vm(program, width, lib_split=libspec.split_keys())
        self.entry = entry
        self.args = tuple(args)

    def initial_state(self):
        return (self.vm.initial_state(self.entry, self.args), 0)

    # -- chains ---------------------------------------------------------------

    def _emit_chain(self, pos: Pos, hat) -> tuple:
        """Emit computation nodes for a hat structure in post-order; returns
        (nodes, ref, next_pos).  Reference leaves produce no nodes."""
        nodes: list[Node] = []

        def rec(h, at: Pos):
            if h[0] == "ref":
                return h[1], at
            _k, head, children = h
            refs = []
            cur = at
            for c in children:
                r, cur = rec(c, cur)
                refs.append(r)
            node = Node(cur, "comp", sym=head, refs=tuple(refs))
            nodes.append(node)
            return cur, cur + (0,)

        ref, nxt = rec(hat, pos)
        return nodes, ref, nxt

    # -- segment production -----------------------------------------------------

    def segment(self, pos: Pos, packed):
        """Yield (node, [(child_pos, child_state)]) pairs for one segment."""
        state, fresh = packed
        while True:
            marker, route = self._micro(state)
            if route == "internal":
                continue
            break

        if isinstance(marker, Stuck):
            yield Node(pos, "end", sym="stuck:{}".format(marker.rule)), []
            return

        if isinstance(marker, Returned):
            hat = _hat_of_term(Term(tag_constructor(FINAL_CALL)))
            nodes, ref, nxt = self._emit_chain(pos, hat)
            for n in nodes:
                yield n, []
            yield Node(nxt, "output", refs=(ref,)), []
            in_pos = nxt + (0,)
            yield Node(in_pos, "input", payload=("final", marker.value, freeze_heap(state.heap))), []
            yield Node(in_pos + (0,), "end", sym="finished"), []
            return

        if isinstance(marker, RandChoice):
            raise EmbeddingError("honest semantics is not internally deterministic (rand)")

        kind, data = marker
        if kind == "adv_value":
            opname, vals, dest = data
            hat = _hat_list([_hat_of_term(Term(tag_constructor(opname)))]
                            + [_hat_of_value(v, self.width) for v in vals])
            nodes, ref, nxt = self._emit_chain(pos, hat)
            for n in nodes:
                yield n, []
            yield Node(nxt, "output", refs=(ref,)), []
            in_pos = nxt + (0,)
            resumed = state.copy()
            self._write_dest(resumed, dest, PosVal(in_pos, "c"))
            resumed.frame.pp += 1
            yield Node(in_pos, "input", payload=(resumed, fresh)), [
                (in_pos + (0,), (resumed, fresh))
            ]
            return

        if kind == "adv_test":
            opname, vals, off = data
            hat = _hat_list([_hat_of_term(Term(tag_constructor(opname)))]
                            + [_hat_of_value(v, self.width) for v in vals])
            nodes, ref, nxt = self._emit_chain(pos, hat)
            for n in nodes:
                yield n, []
            yield Node(nxt, "output", refs=(ref,)), []
            in_pos = nxt + (0,)
            yield Node(in_pos, "input"), []
            comp_pos = in_pos + (0,)
            fall = state.copy()
            fall.frame.pp += 1
            jump = state.copy()
            jump.frame.pp += off
            yield Node(comp_pos, "comp", sym="iszero", refs=(in_pos,), payload=(state, fresh)), [
                (comp_pos + (0,), (fall, fresh)),   # yes: attacker sent zero
                (comp_pos + (1,), (jump, fresh)),   # no: any other input
            ]
            return

        if kind == "lib_op":
            opname, vals, dest_reg = data
            hats = [_hat_of_value(v, self.width) for v in vals]
            nodes_all = []
            refs = []
            cur = pos
            for h in hats:
                nodes, ref, cur = self._emit_chain(cur, h)
                nodes_all.extend(nodes)
                refs.append(ref)
            for nd in nodes_all:
                yield nd, []
            comp_pos = cur
            resumed = state.copy()
            resumed.frame.regs[dest_reg] = PosVal(comp_pos, "b")
            resumed.frame.pp += 1
            yield Node(comp_pos, "comp", sym="d_{}".format(opname), refs=tuple(refs),
                       payload=(resumed, fresh)), [
                (comp_pos + (0,), (resumed, fresh)),
                (comp_pos + (1,), None),
            ]
            return

        if kind == "lib":
            entry, vk, n, recv_loc = data
            if entry.symop.heap:
                raise EmbeddingError(
                    "library operation {} rewrites the heap; unsupported in trees".format(
                        entry.symop.name)
                )
            fr = state.frame
            args = [fr.get(vk + i) for i in range(n)]
            sl = heap_slice(state.heap, recv_loc)
            fresh_box = FreshNonces()
            fresh_box.counter = fresh
            ground = instantiate_for_tree(entry, state.heap[recv_loc], self.width, fresh_box)
            hats = [_hat_of_value(a, self.width) for a in args] + [_hat_heap(sl, self.width)]
            nodes_all = []
            refs = []
            cur = pos
            for h in hats:
                nodes, ref, cur = self._emit_chain(cur, h)
                nodes_all.extend(nodes)
                refs.append(ref)
            for nd in nodes_all:
                yield nd, []
            comp_pos = cur
            resumed = state.copy()
            resumed.frame.regs[RES_LO] = PosVal(comp_pos, entry.symop.result_class)
            resumed.frame.regs[RES_UP] = VOID
            resumed.frame.pp += 1
            yield Node(comp_pos, "comp", sym=ground, refs=tuple(refs),
                       payload=(resumed, fresh_box.counter)), [
                (comp_pos + (0,), (resumed, fresh_box.counter)),
                (comp_pos + (1,), None),
            ]
            return

        raise AssertionError(marker)

    def _write_dest(self, state, dest, value):
        fr = state.frame
        if dest[0] == "reg":
            fr.regs[dest[1]] = value
        else:
            fr.regs[RES_LO] = value
            fr.regs[RES_UP] = VOID

    def _micro(self, state: ConcreteState):
        """One embedded-machine step: concrete rules apply transparently;
        operations on positions and interactive rules surface as markers."""
        ins = self.vm.instr_at(state)
        fr = state.frame
        op = ins.op
        if op in ("unop", "binop"):
            regs = [ins.args[1]] if op == "unop" else [ins.args[1], ins.args[2]]
            vals = [fr.get(r) for r in regs]
            classes = [pos_class(v) for v in vals]
            opname = ins.args[2] if op == "unop" else ins.args[3]
            if all(c == "D" for c in classes):
                return self._plain(state)
            if any(c == "Dc" for c in classes):
                return (("adv_value", (opname, vals, ("reg", ins.args[0]))), "interactive")
            # Bitstring-class positions go to the library destructor node.
            return (("lib_op", (opname, vals, ins.args[0])), "interactive")
        if op == "cmp":
            vals = [fr.get(ins.args[1]), fr.get(ins.args[2])]
            if all(pos_class(v) == "D" for v in vals):
                return self._plain(state)
            raise EmbeddingError("cmp on opaque values is not supported in trees")
        if op in ("if-test", "if-testz"):
            regs = [ins.args[0], ins.args[1]] if op == "if-test" else [ins.args[0]]
            vals = [fr.get(r) for r in regs]
            if all(pos_class(v) == "D" for v in vals):
                return self._plain(state)
            rop = ins.args[3] if op == "if-test" else ins.args[2]
            off = ins.args[2] if op == "if-test" else ins.args[1]
            return (("adv_test", (rop, vals, off)), "interactive")
        if op in INVOKE_KIND:
            mid = ins.args[-1]
            if self.program.mal_kind_of(mid) is not None:
                if op.endswith("-range"):
                    observed = [fr.get(ins.args[0] + i) for i in range(ins.args[1])]
                else:
                    observed = [fr.get(r) for r in ins.args[:5]]
                return (("adv_value", (mid, observed, ("res",))), "interactive")
            if op == "invoke-direct-range":
                vk, n = ins.args[0], ins.args[1]
                recv = fr.get(vk)
                if isinstance(recv, Loc) and recv.loc in state.heap:
                    o = state.heap[recv.loc]
                    if isinstance(o, Obj):
                        entry = resolve(self.libspec, mid, o)
                        if entry is not None:
                            return (("lib", (entry, vk, n, recv.loc)), "interactive")
            return self._plain(state)
        return self._plain(state)

    def _plain(self, state: ConcreteState):
        marker = self.vm.micro_step(state)
        if isinstance(marker, Next):
            return marker, "internal"
        return marker, "boundary"


def instantiate_for_tree(entry, receiver: Obj, width: int, fresh: FreshNonces) -> str:
    """Node symbol for a library computation: the ground operation (field
    values and fresh nonces burned in), applied to the referenced
    arguments.  The pass-through heap pairing of pure entries is stripped;
    the tree node computes the result itself."""
    from .crypto_api import instantiate_symop
    from .terms import render_op
    ground = instantiate_symop(entry.symop, receiver, width, fresh)
    if not entry.symop.heap and ground.head == "pair":
        body = ground.args[0]
    else:
        body = ground
    return "op:" + render_op(body)


def embed(program: Program, width: int, model: SymbolicModel, libspec: LibSpec,
          entry: str = "main", args: Sequence = ()) -> ProtocolTree:
    """The protocol tree of a pre-compliant program's honest semantics."""
    from .bytecode import static_rand_scan
    diags = static_rand_scan(program, entry)
    if diags:
        raise EmbeddingError("; ".join(str(d) for d in diags))
    return ProtocolTree(EmbedMachine(program, width, model, libspec, entry, args))


# ---------------------------------------------------------------------------
# Symbolic execution of a tree
# ---------------------------------------------------------------------------


@dataclass
class SymExecCursor:
    view: tuple
    pos: Pos
    f: dict  # pos -> Term


def sym_exec_step(model: SymbolicModel, tree: ProtocolTree, cursor: SymExecCursor,
                  adversary_input=None) -> SymExecCursor:
    """One smallest-relation step over the tree: computation nodes take the
    yes edge iff evaluation is defined; input nodes consume a (term,
    recipe) pair valid against Out(view); output nodes publish; control
    nodes take the supplied in-metadata label."""
    node = tree.node(cursor.pos)
    if node is None or node.kind == "end":
        raise ValueError("no node to execute at {}".format(cursor.pos))
    if node.kind == "comp":
        sym = node.sym
        args = [cursor.f[r] for r in node.refs]
        if sym.startswith("op:"):
            from .terms import parse_op
            m = eval_op(model, parse_op(sym[3:]), args)
        else:
            m = eval_symbol(model, sym, args)
        if m is not None:
            f2 = dict(cursor.f)
            f2[node.pos] = m
            return SymExecCursor(cursor.view, node.pos + (0,), f2)
        return SymExecCursor(cursor.view, node.pos + (1,), cursor.f)
    if node.kind == "input":
        if adversary_input is None:
            raise ValueError("input node needs (term, recipe)")
        term, recipe = adversary_input
        got = eval_op(model, recipe, out_terms(cursor.view))
        if got != term:
            raise ValueError("rejected input: recipe does not derive the term")
        f2 = dict(cursor.f)
        f2[node.pos] = term
        return SymExecCursor(cursor.view + (InEvent(term, recipe),), node.pos + (0,), f2)
    if node.kind == "output":
        t = cursor.f[node.refs[0]]
        return SymExecCursor(cursor.view + (OutEvent((t,)),), node.pos + (0,), cursor.f)
    if node.kind == "control":
        label = adversary_input
        if label not in node.edge_labels:
            label = min(node.edge_labels)
        idx = node.edge_labels.index(label)
        view = cursor.view + (ControlEvent(node.out_meta, label),)
        return SymExecCursor(view, node.pos + (idx,), cursor.f)
    raise AssertionError(node.kind)


# ---------------------------------------------------------------------------
# Computational execution of a tree
# ---------------------------------------------------------------------------


@dataclass
class CompExecCursor:
    pos: Pos
    f: dict        # pos -> bitstring
    nonces: dict   # nonce name -> bitstring


class Channel:
    """Attacker side of the computational execution."""

    def deliver(self, bits: str) -> None:
        raise NotImplementedError

    def provide(self) -> str:
        raise NotImplementedError

    def choose(self, out_meta: str, labels: tuple) -> Optional[str]:
        return None


class ScriptChannel(Channel):
    """Scripted attacker: records deliveries, replays provided inputs."""

    def __init__(self, inputs: Sequence[str] = (), controls: Sequence[str] = ()):
        self.sent: list[str] = []
        self.inputs = list(inputs)
        self.controls = list(controls)

    def deliver(self, bits: str) -> None:
        self.sent.append(bits)

    def provide(self) -> str:
        return self.inputs.pop(0) if self.inputs else ""

    def choose(self, out_meta: str, labels: tuple) -> Optional[str]:
        return self.controls.pop(0) if self.controls else None


def comp_exec_step(impl: Impl, tree: ProtocolTree, cursor: CompExecCursor,
                   channel: Channel, rng, model: SymbolicModel) -> CompExecCursor:
    """One computational step: nonce nodes draw once and cache; other
    computation nodes run the implementation and branch on definedness;
    output/input exchange bitstrings with the channel; unknown control
    replies fall back to the lexicographically smallest edge label."""
    node = tree.node(cursor.pos)
    if node is None or node.kind == "end":
        raise ValueError("no node to execute at {}".format(cursor.pos))
    if node.kind == "comp":
        sym = node.sym
        if sym.startswith("n!") or sym.startswith("n?"):
            if sym not in cursor.nonces:
                cursor.nonces[sym] = impl.draw_nonce(rng)
            m = cursor.nonces[sym]
        elif sym.startswith("op:"):
            from .terms import parse_op
            m = _impl_eval_with_cache(impl, parse_op(sym[3:]),
                                      [cursor.f[r] for r in node.refs], cursor.nonces, rng)
        else:
            m = impl.apply(sym, [cursor.f[r] for r in node.refs])
        if m is not None:
            f2 = dict(cursor.f)
            f2[node.pos] = m
            return CompExecCursor(node.pos + (0,), f2, cursor.nonces)
        return CompExecCursor(node.pos + (1,), cursor.f, cursor.nonces)
    if node.kind == "input":
        bits = channel.provide()
        f2 = dict(cursor.f)
        f2[node.pos] = bits
        return CompExecCursor(node.pos + (0,), f2, cursor.nonces)
    if node.kind == "output":
        channel.deliver(cursor.f[node.refs[0]])
        return CompExecCursor(node.pos + (0,), cursor.f, cursor.nonces)
    if node.kind == "control":
        label = channel.choose(node.out_meta, node.edge_labels)
        if label not in node.edge_labels:
            label = min(node.edge_labels)
        idx = node.edge_labels.index(label)
        return CompExecCursor(node.pos + (idx,), cursor.f, cursor.nonces)
    raise AssertionError(node.kind)


def _impl_eval_with_cache(impl: Impl, op: Op, inputs, nonce_cache: dict, rng):
    def ev(o: Op):
        if o.param:
            return inputs[o.param - 1]
        if o.head.startswith("n!") or o.head.startswith("n?"):
            if o.head not in nonce_cache:
                nonce_cache[o.head] = impl.draw_nonce(rng)
            return nonce_cache[o.head]
        vals = []
        for a in o.args:
            v = ev(a)
            if v is None:
                return None
            vals.append(v)
        return impl.apply(o.head, vals)

    return ev(op)


# ---------------------------------------------------------------------------
# Quasi-atomic traces
# ---------------------------------------------------------------------------


def quasi_atomic_split(trace: Sequence) -> list:
    """Partition a trace at global-transition boundaries: each segment ends
    with an out/lc label (inclusive) and starts right after the preceding
    in/lr label.  Concatenating the segments reproduces the trace."""
    segments: list[list] = []
    cur: list = []
    for ev in trace:
        cur.append(ev)
        kind = ev[0] if isinstance(ev, tuple) and ev else None
        if kind in ("out", "lc"):
            segments.append(cur)
            cur = []
    if cur:
        segments.append(cur)
    return segments


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------


def export_tree(tree: ProtocolTree, max_nodes: int) -> dict:
    """Breadth-first JSON-ready dump of node ids, kinds, references, and
    edges, truncated at max_nodes with a marker."""
    if max_nodes < 1:
        raise ValueError("max_nodes must be >= 1")
    out_nodes = []
    queue: list[Pos] = [()]
    seen = 0
    truncated = False
    while queue:
        pos = queue.pop(0)
        node = tree.node(pos)
        if node is None:
            continue
        if seen >= max_nodes:
            truncated = True
            break
        seen += 1
        out_nodes.append({
            "pos": list(pos),
            "kind": node.kind,
            "sym": node.sym,
            "refs": [list(r) for r in node.refs],
            "edges": list(node.edges()),
            "has_state": node.payload is not None,
        })
        for i, _label in enumerate(node.edges()):
            queue.append(pos + (i,))
    return {"nodes": out_nodes, "truncated": truncated}


def import_tree(doc) -> dict:
    """Parse an exported document back into {pos: node-dict}."""
    if isinstance(doc, str):
        doc = json.loads(doc)
    return {tuple(n["pos"]): n for n in doc["nodes"]}
