"""Fixed-width numeric semantics shared by the concrete VM and the lifted
bitstring destructors.

All arithmetic is over w-bit two's-complement integers with wraparound.
Division truncates toward zero (Dalvik semantics); division or remainder
by zero raises ZeroDivisionError, which callers map to a stuck state
(concretely) or to the undefined result (symbolically).  Shift amounts are
reduced mod the width.
"""

from __future__ import annotations

UNOP_NAMES = ("neg", "not")
BINOP_NAMES = ("add", "sub", "mul", "div", "rem",
               "and", "or", "xor", "shl", "shr", "ushr")
RELOP_NAMES = ("eq", "ne", "lt", "gt", "le", "ge")

# Pretty operator spellings used in rendered instructions and traces.
OP_GLYPHS = {
    "neg": "-", "not": "~",
    "add": "+", "sub": "-", "mul": "*", "div": "/", "rem": "%",
    "and": "&", "or": "|", "xor": "^", "shl": "<<", "shr": ">>", "ushr": ">>>",
    "eq": "==", "ne": "!=", "lt": "<", "gt": ">", "le": "<=", "ge": ">=",
}


def wrap(n: int, w: int) -> int:
    """Reduce n to the signed w-bit range [-2^(w-1), 2^(w-1) - 1]."""
    n &= (1 << w) - 1
    if n >= 1 << (w - 1):
        n -= 1 << w
    return n


def to_unsigned(n: int, w: int) -> int:
    return n & ((1 << w) - 1)


def int_to_bits(n: int, w: int) -> str:
    """Two's-complement bitstring of width w, most significant bit first."""
    return format(to_unsigned(n, w), "0{}b".format(w))


def bits_to_int(bits: str) -> int:
    """Signed value of a nonempty two's-complement bitstring."""
    return wrap(int(bits, 2), len(bits))


def _jdiv(a: int, b: int) -> int:
    # Java/Dalvik division truncates toward zero; Python's // floors.
    q = abs(a) // abs(b)
    return -q if (a < 0) != (b < 0) else q


def _jrem(a: int, b: int) -> int:
    return a - _jdiv(a, b) * b


def apply_unop(op: str, a: int, w: int) -> int:
    if op == "neg":
        return wrap(-a, w)
    if op == "not":
        return wrap(~a, w)
    raise ValueError("unknown unop {!r}".format(op))


def apply_binop(op: str, a: int, b: int, w: int) -> int:
    if op == "add":
        return wrap(a + b, w)
    if op == "sub":
        return wrap(a - b, w)
    if op == "mul":
        return wrap(a * b, w)
    if op == "div":
        return wrap(_jdiv(a, b), w)
    if op == "rem":
        return wrap(_jrem(a, b), w)
    if op == "and":
        return wrap(a & b, w)
    if op == "or":
        return wrap(a | b, w)
    if op == "xor":
        return wrap(a ^ b, w)
    sh = to_unsigned(b, w) % w
    if op == "shl":
        return wrap(a << sh, w)
    if op == "shr":
        return wrap(a >> sh, w)
    if op == "ushr":
        return wrap(to_unsigned(a, w) >> sh, w)
    raise ValueError("unknown binop {!r}".format(op))


def apply_relop(op: str, a: int, b: int) -> bool:
    if op == "eq":
        return a == b
    if op == "ne":
        return a != b
    if op == "lt":
        return a < b
    if op == "gt":
        return a > b
    if op == "le":
        return a <= b
    if op == "ge":
        return a >= b
    raise ValueError("unknown relop {!r}".format(op))
