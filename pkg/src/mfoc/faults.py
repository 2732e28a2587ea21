"""Test-only fault injection.

The check command can flip well-defined internal signs to prove that the
invariant battery actually detects corruption. Production code paths consult
``active`` which is a cheap set lookup and empty by default.
"""

from __future__ import annotations

KNOWN_FAULTS = frozenset({"adjoint-sign"})

_active: set[str] = set()


def inject(name: str) -> None:
    if name not in KNOWN_FAULTS:
        raise ValueError(f"unknown fault {name!r}; known: {sorted(KNOWN_FAULTS)}")
    _active.add(name)


def clear() -> None:
    _active.clear()


def active(name: str) -> bool:
    return name in _active
