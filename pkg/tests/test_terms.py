import itertools
import random

import pytest

from adl import ops
from adl.terms import (
    CONSTRUCTOR,
    DESTRUCTOR,
    ModelError,
    Op,
    SymbolId,
    SymbolicModel,
    Term,
    att_nonce,
    bitstring_model,
    combine_models,
    embeddable_model,
    eval_op,
    eval_symbol,
    in_iota_range,
    iota_decode,
    iota_encode,
    lift_bitstring_fn,
    parse_op,
    parse_term,
    proto_nonce,
    reduce_trace,
    render,
    render_op,
    term_to_op,
)


@pytest.fixture(scope="module")
def bmodel():
    return bitstring_model()


@pytest.fixture(scope="module")
def emodel():
    return embeddable_model()


def test_eval_symbol_equals(bmodel):
    t = iota_encode("10")
    assert eval_symbol(bmodel, "equals", [t, t]) == t
    assert eval_symbol(bmodel, "equals", [t, iota_encode("11")]) is None


def test_eval_symbol_pair_projections(emodel):
    a, b = proto_nonce("a"), proto_nonce("b")
    p = eval_symbol(emodel, "pair", [a, b])
    assert eval_symbol(emodel, "fst", [p]) == a
    assert eval_symbol(emodel, "snd", [p]) == b


def test_eval_symbol_unstring_bottom(bmodel):
    assert eval_symbol(bmodel, "unstring_0", [Term("string_1", (Term("emp"),))]) is None


def test_eval_symbol_nonce(bmodel):
    assert eval_symbol(bmodel, "n!k", []) == proto_nonce("k")


def test_eval_symbol_arity_mismatch_is_usage_error(bmodel):
    with pytest.raises(ModelError):
        eval_symbol(bmodel, "equals", [Term("emp")])


def test_eval_op_identity(bmodel):
    t = iota_encode("0110")
    assert eval_op(bmodel, Op.x(1), [t]) == t


def test_eval_op_projection(emodel):
    a, b = proto_nonce("a"), proto_nonce("b")
    op = parse_op("fst(pair(x1,x2))")
    assert eval_op(emodel, op, [a, b]) == a


def test_eval_op_bottom_propagates(bmodel):
    op = parse_op("equals(x1,x2)")
    a, b = iota_encode("0"), iota_encode("1")
    assert eval_op(bmodel, op, [a, b]) is None
    wrapped = parse_op("string_0(equals(x1,x2))")
    assert eval_op(bmodel, wrapped, [a, b]) is None


def test_iota_encode_paper_shape():
    t = iota_encode("01101")
    assert render(t) == "string_0(string_1(string_1(string_0(string_1(emp)))))"
    assert iota_encode("") == Term("emp")


def test_iota_decode_basics():
    assert iota_decode(Term("string_1", (Term("emp"),))) == "1"
    assert iota_decode(Term("pair", (Term("emp"), Term("emp")))) is None


def test_iota_round_trip_short():
    for n in range(9):
        for bits in itertools.product("01", repeat=n):
            s = "".join(bits)
            assert iota_decode(iota_encode(s)) == s


def test_iota_range_round_trip():
    rnd = random.Random(3)
    for _ in range(200):
        s = "".join(rnd.choice("01") for _ in range(rnd.randrange(12)))
        t = iota_encode(s)
        assert in_iota_range(t)
        assert iota_encode(iota_decode(t)) == t


def test_reduce_trace_reaches_emp(bmodel):
    t = iota_encode("01101")
    expr = parse_op(
        "equals(unstring_1(unstring_0(unstring_1(unstring_1(unstring_0({}))))),emp)".format(render(t))
    )
    steps = reduce_trace(bmodel, expr)
    assert steps[-1] == "emp"
    assert len(steps) == 7  # five unstrings, one equals, plus the start


def test_lift_and_gate(emodel):
    sid, fn = lift_bitstring_fn("d_bitand", 2, lambda a, b: "".join(
        "1" if x == "1" and y == "1" else "0" for x, y in zip(a, b)) if len(a) == len(b) else None)
    m = emodel.extended([sid], {"d_bitand": fn})
    one = iota_encode("1")
    assert eval_symbol(m, "d_bitand", [one, one]) == one
    assert eval_symbol(m, "d_bitand", [Term("pair", (one, one)), one]) is None


def test_lift_xor_example(emodel):
    got = eval_symbol(emodel, "d_xor", [iota_encode("10"), iota_encode("11")])
    assert got == iota_encode("01")


def test_lift_name_collision(emodel):
    sid, fn = lift_bitstring_fn("d_xor", 2, lambda a, b: a)
    with pytest.raises(ModelError):
        emodel.extended([sid], {"d_xor": fn})


def test_lifted_destructor_agrees_with_bit_function():
    m = embeddable_model()
    # Exhaustive at short widths, sampled at the invariant's upper bound.
    cases = [(a, b)
             for n in range(1, 6)
             for a in ("".join(p) for p in itertools.product("01", repeat=n))
             for b in ("".join(p) for p in itertools.product("01", repeat=n))]
    rnd = random.Random(11)
    for _ in range(300):
        n = rnd.randrange(1, 9)
        cases.append(("".join(rnd.choice("01") for _ in range(n)),
                      "".join(rnd.choice("01") for _ in range(n))))
    for a, b in cases:
        got = eval_symbol(m, "d_xor", [iota_encode(a), iota_encode(b)])
        want = "".join("1" if x != y else "0" for x, y in zip(a, b))
        assert iota_decode(got) == want


def test_combine_models_union_and_disjointness(bmodel):
    other = SymbolicModel(
        [SymbolId("enc2", 2, CONSTRUCTOR), SymbolId("dec2", 2, DESTRUCTOR)],
        {"dec2": lambda k, c: c.args[1] if c.head == "enc2" and c.args[0] == k else None},
    )
    both = combine_models(bmodel, other)
    assert "string_0" in both.symbols and "enc2" in both.symbols
    with pytest.raises(ModelError):
        combine_models(bmodel, bmodel)
    # evaluation unchanged on old symbols
    t = iota_encode("01")
    assert eval_symbol(both, "unstring_0", [t]) == eval_symbol(bmodel, "unstring_0", [t])
    assert eval_symbol(both, "equals", [t, t]) == t


def test_destructor_determinism(emodel):
    rnd = random.Random(5)
    for _ in range(50):
        s = "".join(rnd.choice("01") for _ in range(rnd.randrange(1, 8)))
        t = iota_encode(s)
        first = eval_symbol(emodel, "unstring_" + s[0], [t])
        for _ in range(3):
            assert eval_symbol(emodel, "unstring_" + s[0], [t]) == first


def test_transparent_pair_law(emodel):
    rnd = random.Random(7)
    leaves = [proto_nonce("a"), att_nonce("b"), Term("emp"), iota_encode("101")]

    def rand_term(depth):
        if depth == 0 or rnd.random() < 0.3:
            return rnd.choice(leaves)
        return Term("pair", (rand_term(depth - 1), rand_term(depth - 1)))

    for _ in range(100):
        x, y = rand_term(3), rand_term(3)
        p = Term("pair", (x, y))
        assert eval_symbol(emodel, "fst", [p]) == x
        assert eval_symbol(emodel, "snd", [p]) == y


def test_equals_iff_structural_equality_small_terms():
    m = SymbolicModel(
        [SymbolId("c0", 0, CONSTRUCTOR), SymbolId("f", 1, CONSTRUCTOR),
         SymbolId("equals", 2, DESTRUCTOR)],
        {"equals": lambda x, y: x if x == y else None},
    )

    def terms_upto(size):
        if size <= 0:
            return []
        out = [Term("c0")]
        for t in terms_upto(size - 1):
            out.append(Term("f", (t,)))
        return out

    universe = terms_upto(4)
    for x in universe:
        for y in universe:
            got = eval_symbol(m, "equals", [x, y])
            assert (got is not None) == (x == y)


def test_render_parse_round_trip():
    texts = [
        "emp",
        "n!k",
        "n?a0",
        "pair(string_0(emp),n!k)",
        "enc(n!k,string_1(emp),n!r)",
    ]
    for s in texts:
        assert render(parse_term(s)) == s
    op_texts = ["x1", "fst(x2)", "equals(x1,pair(x2,n?a0))"]
    for s in op_texts:
        assert render_op(parse_op(s)) == s


def test_term_to_op_ground_evaluation(emodel):
    t = Term("pair", (iota_encode("1"), proto_nonce("k")))
    assert eval_op(emodel, term_to_op(t), []) == t
