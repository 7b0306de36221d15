"""Toolkit for the Abstract Dalvik Language: concrete probabilistic
execution with an external attacker, symbolic Dolev-Yao execution, the
split-state composition tying them together, protocol-tree embedding, and
bounded equivalence checking."""

__version__ = "0.1.0"
