"""Wiring helpers: load a program, build its symbolic model, and attach a
library specification from the named-operation registry.

The builtin registry covers the shipped corpus; a JSON registry file with
the same schema extends or overrides it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .bytecode import Program, parse
from .crypto_api import (
    Impl,
    LibSpec,
    SymOpSpec,
    build_libspec,
    load_registry,
    toy_impl,
)
from .encoding import with_heap_constructors
from .symbolic_vm import SymVm, model_tags
from .terms import (
    CONSTRUCTOR,
    DESTRUCTOR,
    SymbolId,
    SymbolicModel,
    Term,
    combine_models,
    embeddable_model,
    parse_op,
)

DEFAULT_REGISTRY = {
    # Encryption under a key drawn fresh for this call.
    "enc_fresh": SymOpSpec("enc_fresh", parse_op("enc(fresh!k,x2,fresh!r)"), 2, "c", False),
    # Encryption under the run-wide key n!k (paired with keygen below).
    "enc_keyed": SymOpSpec("enc_keyed", parse_op("enc(n!k,x2,fresh!r)"), 2, "c", False),
    "keygen": SymOpSpec("keygen", parse_op("n!k"), 1, "c", False),
    "junkgen": SymOpSpec("junkgen", parse_op("n!j"), 1, "c", False),
    # One-time-pad style masking: symbolically a fresh opaque value.
    "otp_mask": SymOpSpec("otp_mask", parse_op("fresh!p"), 2, "c", False),
    # Deterministic xor against a pad stored in the receiver.
    "mix": SymOpSpec("mix", parse_op("d_xor(x2,field:pad)"), 2, "b", False),
    "identity2": SymOpSpec("identity2", parse_op("x2"), 2, "b", False),
}


def toy_crypto_model() -> SymbolicModel:
    """A free ternary encryption constructor with its decryption destructor:
    dec(k, enc(k, m, r)) = m."""

    def d_dec(k: Term, c: Term):
        if c.head == "enc" and len(c.args) == 3 and c.args[0] == k:
            return c.args[1]
        return None

    return SymbolicModel(
        [SymbolId("enc", 3, CONSTRUCTOR), SymbolId("dec", 2, DESTRUCTOR)],
        {"dec": d_dec},
    )


def build_model(program: Program, crypto: bool = True) -> SymbolicModel:
    model = with_heap_constructors(embeddable_model(tags=model_tags(program)))
    if crypto:
        model = combine_models(model, toy_crypto_model())
    return model


@dataclass
class Context:
    """Everything needed to run one program in all three semantics."""

    program: Program
    width: int
    model: SymbolicModel
    libspec: LibSpec
    registry: dict

    def sym_vm(self) -> SymVm:
        return SymVm(self.program, self.width, self.model, self.libspec)

    def impl(self, nonce_len: int = 16) -> Impl:
        return toy_impl(self.model, self.width, nonce_len)


def load_context(source: str, width: int, registry_json: Optional[str] = None,
                 crypto: bool = True) -> Context:
    program = parse(source)
    registry = dict(DEFAULT_REGISTRY)
    if registry_json:
        registry.update(load_registry(registry_json))
    libspec = build_libspec(program.libspec_decls, registry)
    model = build_model(program, crypto=crypto)
    return Context(program, width, model, libspec, registry)
