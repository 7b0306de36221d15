"""ADL programs: instruction set, line-oriented assembly, and static checks.

Assembly grammar (one directive or instruction per line, '#' comments):

    .class Name
    .field Class.f
    .method [static] Label { ... }     (instructions until a lone '}')
    .mal static Name/arity             (also: virtual, super, direct)
    .lookup static Name -> Label
    .lookup direct Class.Name -> Label (also: super, virtual)
    .libspec Class.Name when <pred> => <symop-name>

Registers are v0..vK; the reserved result registers res_lo/res_up are not
valid operands (move-result reads them).  Offsets may be negative for goto
only.  -wide instruction variants parse but are rejected by validate.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from .ops import BINOP_NAMES, RELOP_NAMES, UNOP_NAMES

MAL_KINDS = ("static", "virtual", "super", "direct")

# Operand signatures: r register, n offset/int (signed only for goto),
# u/b/p operator names, m/f/c/s identifiers, N trailing int list.
OPERANDS = {
    "move": "rr",
    "const": "rn",
    "cmp": "rrr",
    "unop": "rru",
    "binop": "rrrb",
    "array-length": "rr",
    "new-array": "rr",
    "filled-new-array": "rrrrrn",
    "filled-new-array-range": "rn",
    "fill-array-data": "rN",
    "aget": "rrr",
    "aput": "rrr",
    "nop": "",
    "goto": "n",
    "if-test": "rrnp",
    "if-testz": "rnp",
    "instance-of": "rrc",
    "new-instance": "rc",
    "const-string": "rs",
    "const-class": "rc",
    "iget": "rrf",
    "iput": "rrf",
    "sget": "rf",
    "sput": "rf",
    "invoke-virtual": "rrrrrnm",
    "invoke-super": "rrrrrnm",
    "invoke-direct": "rrrrrnm",
    "invoke-interface": "rrrrrnm",
    "invoke-static": "rrrrrnm",
    "invoke-virtual-range": "rnm",
    "invoke-direct-range": "rnm",
    "invoke-static-range": "rnm",
    "move-result": "r",
    "return-void": "",
    "return": "r",
    "rand": "r",
}

_WIDE_BASES = (
    "move", "const", "cmp", "unop", "binop", "aget", "aput",
    "iget", "iput", "sget", "sput", "move-result", "return",
)
for _b in _WIDE_BASES:
    OPERANDS[_b + "-wide"] = OPERANDS[_b]

INVOKE_KIND = {
    "invoke-static": "static",
    "invoke-static-range": "static",
    "invoke-direct": "direct",
    "invoke-direct-range": "direct",
    "invoke-virtual": "virtual",
    "invoke-virtual-range": "virtual",
    "invoke-super": "super",
    "invoke-interface": "virtual",  # interface calls resolve virtually
}


@dataclass(frozen=True)
class Instr:
    op: str
    args: tuple

    def __repr__(self):
        return "Instr({})".format(render_instr(self))


Method = tuple  # nonempty tuple of Instr


@dataclass(frozen=True)
class LibSpecDecl:
    cid: str
    mid: str
    predicate: tuple  # of ("eq", field, int) | ("has", field)
    opname: str


@dataclass
class Program:
    class_ids: set = field(default_factory=set)
    field_ids: set = field(default_factory=set)       # "Class.f" strings
    method_ids: set = field(default_factory=set)
    methods: dict = field(default_factory=dict)       # label -> Method
    static_methods: set = field(default_factory=set)  # labels declared static
    fields: dict = field(default_factory=dict)        # class -> [field names]
    lookup_static: dict = field(default_factory=dict)     # mid -> label
    lookup_direct: dict = field(default_factory=dict)     # (mid, cid) -> label
    lookup_super: dict = field(default_factory=dict)
    lookup_virtual: dict = field(default_factory=dict)
    mal: dict = field(default_factory=lambda: {k: {} for k in MAL_KINDS})  # kind -> {mid: arity}
    string_consts: set = field(default_factory=set)
    libspec_decls: list = field(default_factory=list)

    def lookup_field(self, fid: str):
        """fid 'Class.f' -> (class, field) if declared, else None."""
        if fid in self.field_ids:
            cl, f = fid.split(".", 1)
            return cl, f
        return None

    def mal_kind_of(self, mid: str) -> Optional[str]:
        for kind in MAL_KINDS:
            if mid in self.mal[kind]:
                return kind
        return None

    def method(self, label: str) -> Method:
        return self.methods[label]


class ProgramFamily:
    """A uniform family: a deterministic generator from the security
    parameter to a program, with a sample cache."""

    def __init__(self, generator: Callable[[int], Program]):
        self.generator = generator
        self._cache: dict[int, Program] = {}

    def sample(self, eta: int) -> Program:
        if eta not in self._cache:
            self._cache[eta] = self.generator(eta)
        return self._cache[eta]


@dataclass(frozen=True)
class Diagnostic:
    code: str
    message: str
    line: int = 0

    def __str__(self):
        where = " (line {})".format(self.line) if self.line else ""
        return "{}: {}{}".format(self.code, self.message, where)


class ParseError(ValueError):
    def __init__(self, message: str, line: int, col: int = 0):
        super().__init__("line {}: {}".format(line, message))
        self.line = line
        self.col = col


_REG_RE = re.compile(r"^v(\d+)$")
_IDENT_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")
_QUAL_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*\.[A-Za-z_][A-Za-z0-9_]*$")

_UOP_ALIASES = {"-": "neg", "~": "not", "neg": "neg", "not": "not"}
_BOP_ALIASES = {
    "+": "add", "-": "sub", "*": "mul", "/": "div", "%": "rem",
    "&": "and", "|": "or", "^": "xor", "<<": "shl", ">>": "shr", ">>>": "ushr",
}
_BOP_ALIASES.update({n: n for n in BINOP_NAMES})
_ROP_ALIASES = {"==": "eq", "!=": "ne", "<": "lt", ">": "gt", "<=": "le", ">=": "ge"}
_ROP_ALIASES.update({n: n for n in RELOP_NAMES})


def _parse_operand(kind: str, tok: str, mnemonic: str, lineno: int):
    if kind == "r":
        if tok in ("res_lo", "res_up"):
            raise ParseError("reserved register {} is not a valid operand".format(tok), lineno)
        m = _REG_RE.match(tok)
        if not m:
            raise ParseError("expected register, got {!r}".format(tok), lineno)
        return int(m.group(1))
    if kind == "n":
        try:
            n = int(tok)
        except ValueError:
            raise ParseError("expected integer, got {!r}".format(tok), lineno)
        if n < 0 and mnemonic != "goto":
            raise ParseError("negative offset only allowed for goto", lineno)
        return n
    if kind == "u":
        if tok not in _UOP_ALIASES:
            raise ParseError("unknown unary operator {!r}".format(tok), lineno)
        return _UOP_ALIASES[tok]
    if kind == "b":
        if tok not in _BOP_ALIASES:
            raise ParseError("unknown binary operator {!r}".format(tok), lineno)
        return _BOP_ALIASES[tok]
    if kind == "p":
        if tok not in _ROP_ALIASES:
            raise ParseError("unknown relational operator {!r}".format(tok), lineno)
        return _ROP_ALIASES[tok]
    if kind in "mc":
        if not _IDENT_RE.match(tok):
            raise ParseError("expected identifier, got {!r}".format(tok), lineno)
        return tok
    if kind == "f":
        if not _QUAL_RE.match(tok):
            raise ParseError("expected Class.field, got {!r}".format(tok), lineno)
        return tok
    if kind == "s":
        if tok.startswith('"') and tok.endswith('"') and len(tok) >= 2:
            return tok[1:-1]
        if _IDENT_RE.match(tok):
            return tok
        raise ParseError("expected string symbol, got {!r}".format(tok), lineno)
    raise AssertionError(kind)


def parse_instr(line: str, lineno: int) -> Instr:
    parts = line.replace(",", " ").split()
    mnemonic, toks = parts[0], parts[1:]
    sig = OPERANDS.get(mnemonic)
    if sig is None:
        raise ParseError("unknown mnemonic {!r}".format(mnemonic), lineno)
    args = []
    if sig.endswith("N"):
        fixed = sig[:-1]
        if len(toks) < len(fixed) + 1:
            raise ParseError("{} needs at least {} operands".format(mnemonic, len(fixed) + 1), lineno)
        for kind, tok in zip(fixed, toks):
            args.append(_parse_operand(kind, tok, mnemonic, lineno))
        tail = []
        for tok in toks[len(fixed):]:
            try:
                tail.append(int(tok))
            except ValueError:
                raise ParseError("expected integer, got {!r}".format(tok), lineno)
        args.append(tuple(tail))
    else:
        if len(toks) != len(sig):
            raise ParseError(
                "{} takes {} operands, got {}".format(mnemonic, len(sig), len(toks)), lineno
            )
        for kind, tok in zip(sig, toks):
            args.append(_parse_operand(kind, tok, mnemonic, lineno))
    return Instr(mnemonic, tuple(args))


def render_instr(ins: Instr) -> str:
    sig = OPERANDS[ins.op]
    toks = []
    if sig.endswith("N"):
        kinds = sig[:-1]
        for kind, a in zip(kinds, ins.args[:-1]):
            toks.append("v{}".format(a) if kind == "r" else str(a))
        toks.extend(str(x) for x in ins.args[-1])
    else:
        for kind, a in zip(sig, ins.args):
            toks.append("v{}".format(a) if kind == "r" else str(a))
    return ins.op + (" " + ", ".join(toks) if toks else "")


_PRED_ATOM_RE = re.compile(r"^(?:(?P<f>[A-Za-z_]\w*)=(?P<v>-?\d+)|has\s+(?P<g>[A-Za-z_]\w*))$")


def _parse_predicate(text: str, lineno: int) -> tuple:
    text = text.strip()
    if text == "*":
        return ()
    atoms = []
    for part in text.split("&"):
        m = _PRED_ATOM_RE.match(part.strip())
        if not m:
            raise ParseError("bad predicate atom {!r}".format(part.strip()), lineno)
        if m.group("g"):
            atoms.append(("has", m.group("g")))
        else:
            atoms.append(("eq", m.group("f"), int(m.group("v"))))
    return tuple(atoms)


def parse(source: str) -> Program:
    """Parse assembly source into a Program; raises ParseError with a line
    number on syntax errors, duplicate definitions, or unknown mnemonics."""
    p = Program()
    lines = source.splitlines()
    i = 0
    while i < len(lines):
        raw = lines[i]
        i += 1
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        lineno = i
        if line.startswith(".class"):
            name = _directive_ident(line, ".class", lineno)
            if name in p.class_ids:
                raise ParseError("duplicate class {}".format(name), lineno)
            p.class_ids.add(name)
            p.fields.setdefault(name, [])
        elif line.startswith(".field"):
            qual = _directive_ident(line, ".field", lineno, qualified=True)
            cl, f = qual.split(".", 1)
            if qual in p.field_ids:
                raise ParseError("duplicate field {}".format(qual), lineno)
            p.field_ids.add(qual)
            p.fields.setdefault(cl, []).append(f)
        elif line.startswith(".method"):
            m = re.match(r"^\.method(\s+static)?\s+([A-Za-z_]\w*)\s*\{\s*$", line)
            if not m:
                raise ParseError("bad .method header", lineno)
            label = m.group(2)
            if label in p.methods:
                raise ParseError("duplicate method {}".format(label), lineno)
            body = []
            while True:
                if i >= len(lines):
                    raise ParseError("unterminated method {}".format(label), lineno)
                inner = lines[i].split("#", 1)[0].strip()
                i += 1
                if inner == "}":
                    break
                if inner:
                    body.append(parse_instr(inner, i))
            if not body:
                raise ParseError("method {} is empty".format(label), lineno)
            p.methods[label] = tuple(body)
            p.method_ids.add(label)
            if m.group(1):
                p.static_methods.add(label)
        elif line.startswith(".mal"):
            m = re.match(r"^\.mal\s+(\w+)\s+([A-Za-z_]\w*)/(\d+)\s*$", line)
            if not m or m.group(1) not in MAL_KINDS:
                raise ParseError("bad .mal directive", lineno)
            kind, name, arity = m.group(1), m.group(2), int(m.group(3))
            if any(name in p.mal[k] for k in MAL_KINDS):
                raise ParseError("duplicate mal declaration {}".format(name), lineno)
            p.mal[kind][name] = arity
            p.method_ids.add(name)
        elif line.startswith(".lookup"):
            m = re.match(
                r"^\.lookup\s+(static|direct|super|virtual)\s+([A-Za-z_][\w.]*)\s*->\s*([A-Za-z_]\w*)\s*$",
                line,
            )
            if not m:
                raise ParseError("bad .lookup directive", lineno)
            kind, key, label = m.groups()
            if kind == "static":
                if "." in key:
                    raise ParseError("static lookup key is a bare method id", lineno)
                if key in p.lookup_static:
                    raise ParseError("duplicate static lookup for {}".format(key), lineno)
                p.lookup_static[key] = label
                p.method_ids.add(key)
            else:
                if "." not in key:
                    raise ParseError("{} lookup key is Class.method".format(kind), lineno)
                cl, mid = key.split(".", 1)
                table = getattr(p, "lookup_" + kind)
                if (mid, cl) in table:
                    raise ParseError("duplicate {} lookup for {}".format(kind, key), lineno)
                table[(mid, cl)] = label
                p.method_ids.add(mid)
                p.class_ids.add(cl)
                p.fields.setdefault(cl, [])
        elif line.startswith(".libspec"):
            m = re.match(
                r"^\.libspec\s+([A-Za-z_]\w*)\.([A-Za-z_]\w*)\s+when\s+(.*?)\s*=>\s*([A-Za-z_]\w*)\s*$",
                line,
            )
            if not m:
                raise ParseError("bad .libspec directive", lineno)
            cl, mid, pred, opname = m.groups()
            p.libspec_decls.append(LibSpecDecl(cl, mid, _parse_predicate(pred, lineno), opname))
        else:
            raise ParseError("unrecognized directive {!r}".format(line.split()[0]), lineno)
    for method in p.methods.values():
        for ins in method:
            if ins.op == "const-string":
                p.string_consts.add(ins.args[1])
    for cl in p.fields:
        p.fields[cl] = sorted(p.fields[cl])
    return p


def _directive_ident(line: str, directive: str, lineno: int, qualified: bool = False) -> str:
    rest = line[len(directive):].strip()
    pat = _QUAL_RE if qualified else _IDENT_RE
    if not pat.match(rest):
        raise ParseError("bad {} name {!r}".format(directive, rest), lineno)
    return rest


def render(p: Program) -> str:
    """Render a Program back to assembly; parse(render(p)) == p."""
    out = []
    for cl in sorted(p.class_ids):
        out.append(".class {}".format(cl))
    for fid in sorted(p.field_ids):
        out.append(".field {}".format(fid))
    for kind in MAL_KINDS:
        for mid in sorted(p.mal[kind]):
            out.append(".mal {} {}/{}".format(kind, mid, p.mal[kind][mid]))
    for mid in sorted(p.lookup_static):
        out.append(".lookup static {} -> {}".format(mid, p.lookup_static[mid]))
    for kind in ("direct", "super", "virtual"):
        table = getattr(p, "lookup_" + kind)
        for (mid, cl) in sorted(table):
            out.append(".lookup {} {}.{} -> {}".format(kind, cl, mid, table[(mid, cl)]))
    for d in p.libspec_decls:
        if d.predicate:
            pred = " & ".join(
                "has {}".format(a[1]) if a[0] == "has" else "{}={}".format(a[1], a[2])
                for a in d.predicate
            )
        else:
            pred = "*"
        out.append(".libspec {}.{} when {} => {}".format(d.cid, d.mid, pred, d.opname))
    for label in sorted(p.methods):
        static = " static" if label in p.static_methods else ""
        out.append(".method{} {} {{".format(static, label))
        for ins in p.methods[label]:
            out.append("  " + render_instr(ins))
        out.append("}")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# Static validation
# ---------------------------------------------------------------------------


def validate(p: Program) -> list[Diagnostic]:
    """Structural well-formedness: empty list iff the program invariants
    hold, branch targets stay in-method, and every invoked non-malicious
    method id resolves through its lookup table."""
    diags: list[Diagnostic] = []

    overlap = (p.class_ids & p.field_ids) | (p.class_ids & p.method_ids) | (
        p.field_ids & p.method_ids
    )
    if overlap:
        diags.append(Diagnostic("ID_OVERLAP", "CID/FID/MID not disjoint: {}".format(sorted(overlap))))

    all_mal = {mid for kind in MAL_KINDS for mid in p.mal[kind]}
    lookup_ranges = set(p.lookup_static.values())
    for kind in ("direct", "super", "virtual"):
        lookup_ranges |= set(getattr(p, "lookup_" + kind).values())
    for mid in sorted(all_mal):
        in_range = mid in lookup_ranges
        in_dom = mid in p.lookup_static or any(
            k[0] == mid for kind in ("direct", "super", "virtual") for k in getattr(p, "lookup_" + kind)
        )
        if in_range or in_dom:
            diags.append(Diagnostic(
                "MAL_IN_LOOKUP",
                "malicious id {} appears in a lookup table (Mal must be disjoint)".format(mid),
            ))

    for mid, label in sorted(p.lookup_static.items()):
        if label not in p.methods:
            diags.append(Diagnostic("MISSING_METHOD", "static lookup {} -> {} has no body".format(mid, label)))
    for kind in ("direct", "super", "virtual"):
        for (mid, cl), label in sorted(getattr(p, "lookup_" + kind).items()):
            if label not in p.methods:
                diags.append(Diagnostic(
                    "MISSING_METHOD", "{} lookup {}.{} -> {} has no body".format(kind, cl, mid, label)
                ))
            if cl not in p.class_ids:
                diags.append(Diagnostic("UNKNOWN_CLASS", "lookup references class {}".format(cl)))

    for label, method in sorted(p.methods.items()):
        for pp, ins in enumerate(method):
            where = "{}[{}]".format(label, pp)
            if ins.op.endswith("-wide"):
                diags.append(Diagnostic("UNSUPPORTED_VARIANT", "{}: {} (wide variants unsupported)".format(where, ins.op)))
                continue
            if ins.op == "goto":
                tgt = pp + ins.args[0]
                if not (0 <= tgt < len(method)):
                    diags.append(Diagnostic("BRANCH_RANGE", "{}: branch target out of range".format(where)))
            elif ins.op in ("if-test", "if-testz"):
                off = ins.args[2] if ins.op == "if-test" else ins.args[1]
                tgt = pp + off
                if not (0 <= tgt < len(method)) or pp + 1 >= len(method):
                    diags.append(Diagnostic("BRANCH_RANGE", "{}: branch target out of range".format(where)))
            elif ins.op in INVOKE_KIND:
                kind = INVOKE_KIND[ins.op]
                mid = ins.args[-1]
                if p.mal_kind_of(mid):
                    continue
                if kind == "static":
                    if mid not in p.lookup_static:
                        diags.append(Diagnostic("UNRESOLVED_METHOD", "{}: static {} unresolved".format(where, mid)))
                else:
                    table = getattr(p, "lookup_" + kind)
                    if not any(k[0] == mid for k in table):
                        diags.append(Diagnostic("UNRESOLVED_METHOD", "{}: {} {} unresolved".format(where, kind, mid)))
            elif ins.op in ("iget", "iput", "sget", "sput"):
                fid = ins.args[-1]
                if p.lookup_field(fid) is None:
                    diags.append(Diagnostic("UNKNOWN_FIELD", "{}: field {} not declared".format(where, fid)))
            elif ins.op in ("instance-of", "new-instance", "const-class"):
                cl = ins.args[-1]
                if cl not in p.class_ids:
                    diags.append(Diagnostic("UNKNOWN_CLASS", "{}: class {} not declared".format(where, cl)))
    return diags


def libspec_bound_labels(p: Program) -> set:
    """Method labels reachable as crypto-API entry points via .libspec."""
    labels = set()
    for d in p.libspec_decls:
        label = p.lookup_direct.get((d.mid, d.cid))
        if label is not None:
            labels.add(label)
    return labels


def _callees(p: Program, label: str) -> set:
    out = set()
    for ins in p.methods.get(label, ()):
        if ins.op in INVOKE_KIND:
            mid = ins.args[-1]
            if p.mal_kind_of(mid):
                continue
            kind = INVOKE_KIND[ins.op]
            if kind == "static":
                tgt = p.lookup_static.get(mid)
                if tgt:
                    out.add(tgt)
            else:
                table = getattr(p, "lookup_" + kind)
                out.update(v for (m, _c), v in table.items() if m == mid)
    return out


def static_rand_scan(p: Program, entry: str = "main") -> list[Diagnostic]:
    """Flag rand instructions in methods reachable from the entry point
    without passing through a libspec-bound method (pre-compliance: only
    the crypto-API and the adversary may use rand)."""
    bound = libspec_bound_labels(p)
    reachable = set()
    stack = [entry] if entry in p.methods else []
    while stack:
        label = stack.pop()
        if label in reachable or label in bound:
            continue
        reachable.add(label)
        stack.extend(_callees(p, label))
    diags = []
    for label in sorted(reachable):
        for pp, ins in enumerate(p.methods[label]):
            if ins.op == "rand":
                diags.append(Diagnostic(
                    "RAND_OUTSIDE_LIBRARY",
                    "{}[{}]: rand outside the crypto-API".format(label, pp),
                ))
    return diags
