"""Phoneme inventory, CI state labels and triphone state classes.

Index conventions used throughout the package:

* context symbols (left/right neighbours): phoneme ``k`` -> ``k`` for
  ``0 <= k < P``, silence -> ``P``; alphabet size ``P + 1``.
* CI state labels: phoneme ``k`` at HMM position ``i`` -> ``3k + i``,
  silence -> ``3P``; label count ``3P + 1``.
* triphone contexts ``(left, center, right)`` are numbered by
  :func:`context_id`; the single silence context comes last.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

STATES_PER_PHONEME = 3


class InventoryError(ValueError):
    pass


@dataclass(frozen=True)
class StateLabel:
    kind: str  # "phoneme-state" | "silence"
    phoneme: str | None = None
    position: int | None = None

    def __str__(self) -> str:
        if self.kind == "silence":
            return "<sil>"
        return f"{self.phoneme}.{self.position}"


class TriphoneContext(NamedTuple):
    """State class ``(left, center, right)`` as integer indices."""

    left: int
    center: int
    right: int


@dataclass(frozen=True)
class PhonemeInventory:
    phonemes: tuple[str, ...]
    silence: str = "sil"

    def __post_init__(self):
        phonemes = tuple(self.phonemes)
        object.__setattr__(self, "phonemes", phonemes)
        if len(phonemes) < 1:
            raise InventoryError("inventory needs at least one phoneme")
        if any(not p or p.strip() != p or " " in p for p in phonemes):
            raise InventoryError("phoneme symbols must be non-empty tokens")
        if len(set(phonemes)) != len(phonemes):
            raise InventoryError("duplicate phoneme symbol")
        if not self.silence or self.silence in phonemes:
            raise InventoryError("silence symbol must be distinct from phonemes")

    @classmethod
    def default(cls, size: int) -> "PhonemeInventory":
        return cls(tuple(f"p{k}" for k in range(size)))

    @property
    def size(self) -> int:
        return len(self.phonemes)

    @property
    def n_context(self) -> int:
        """Size of the left/right context alphabet (phonemes + silence)."""
        return self.size + 1

    @property
    def n_states(self) -> int:
        return STATES_PER_PHONEME * self.size + 1

    @property
    def sil(self) -> int:
        """Context index of silence."""
        return self.size

    @property
    def sil_state(self) -> int:
        return STATES_PER_PHONEME * self.size

    @property
    def n_contexts(self) -> int:
        P = self.size
        return (P + 1) * STATES_PER_PHONEME * P * (P + 1) + 1

    def symbol_index(self, symbol: str) -> int:
        if symbol == self.silence:
            return self.sil
        try:
            return self.phonemes.index(symbol)
        except ValueError:
            raise InventoryError(f"unknown phoneme symbol {symbol!r}") from None

    def symbol(self, index: int) -> str:
        if index == self.sil:
            return self.silence
        if not 0 <= index < self.size:
            raise InventoryError(f"context index {index} out of range")
        return self.phonemes[index]

    def state_index(self, phoneme: int, position: int) -> int:
        if phoneme == self.sil:
            return self.sil_state
        return STATES_PER_PHONEME * phoneme + position

    def state_label(self, index: int) -> StateLabel:
        if index == self.sil_state:
            return StateLabel("silence")
        if not 0 <= index < self.sil_state:
            raise InventoryError(f"state label {index} out of range")
        p, i = divmod(index, STATES_PER_PHONEME)
        return StateLabel("phoneme-state", self.phonemes[p], i)

    def describe(self, ctx: TriphoneContext) -> str:
        return f"{self.symbol(ctx.left)}-{self.state_label(ctx.center)}+{self.symbol(ctx.right)}"

    def write(self, path: str | Path) -> None:
        lines = [self.silence, *self.phonemes]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "PhonemeInventory":
        lines = [ln.strip() for ln in Path(path).read_text().splitlines()]
        lines = [ln for ln in lines if ln and not ln.startswith("#")]
        if len(lines) < 2:
            raise InventoryError(f"{path}: need a silence line and at least one phoneme")
        return cls(tuple(lines[1:]), silence=lines[0])


def state_label_count(inv: PhonemeInventory) -> int:
    return inv.n_states


def context_id(inv: PhonemeInventory, left, center, right):
    """Dense context number; works elementwise on integer arrays."""
    P = inv.size
    S = STATES_PER_PHONEME * P
    center = np.asarray(center)
    ids = (np.asarray(left) * S + center) * (P + 1) + np.asarray(right)
    ids = np.where(center == S, inv.n_contexts - 1, ids)
    return int(ids) if ids.ndim == 0 else ids


def context_table(inv: PhonemeInventory) -> np.ndarray:
    """All valid contexts as an ``(n_contexts, 3)`` int array, in id order."""
    P = inv.size
    S = STATES_PER_PHONEME * P
    L, C, R = np.meshgrid(np.arange(P + 1), np.arange(S), np.arange(P + 1), indexing="ij")
    table = np.stack([L.ravel(), C.ravel(), R.ravel()], axis=1)
    sil = np.array([[inv.sil, inv.sil_state, inv.sil]])
    return np.concatenate([table, sil]).astype(np.int64)


def enumerate_contexts(inv: PhonemeInventory) -> list[TriphoneContext]:
    return [TriphoneContext(*map(int, row)) for row in context_table(inv)]


def hmm_state_sequence(inv: PhonemeInventory, phones: Sequence[int]) -> np.ndarray:
    """Spell a phone string into its left-to-right HMM.

    Returns an ``(n_states, 2)`` array of (phone position, CI state label).
    Silence contributes a single state, phonemes three.
    """
    rows = []
    for m, ph in enumerate(phones):
        if ph == inv.sil:
            rows.append((m, inv.sil_state))
        else:
            rows.extend((m, inv.state_index(ph, i)) for i in range(STATES_PER_PHONEME))
    return np.asarray(rows, dtype=np.int64).reshape(-1, 2)


def phone_contexts(inv: PhonemeInventory, phones: Sequence[int]) -> np.ndarray:
    """Triphone state class of every HMM state of a phone string, ``(n, 3)``."""
    phones = list(phones)
    seq = hmm_state_sequence(inv, phones)
    out = np.empty((len(seq), 3), dtype=np.int64)
    for k, (m, state) in enumerate(seq):
        if state == inv.sil_state:
            out[k] = (inv.sil, state, inv.sil)
            continue
        left = phones[m - 1] if m > 0 else inv.sil
        right = phones[m + 1] if m + 1 < len(phones) else inv.sil
        out[k] = (left, state, right)
    return out


def map_state_class(inv: PhonemeInventory, phones: Sequence[int], state_index: int) -> TriphoneContext:
    """Map the ``state_index``-th HMM state of an utterance to its state class.

    Neighbours are taken from the utterance-level phone string, so context
    crosses word boundaries unless a silence intervenes.
    """
    seq = hmm_state_sequence(inv, phones)
    if not 0 <= state_index < len(seq):
        raise InventoryError(
            f"state index {state_index} outside spelled HMM of {len(seq)} states"
        )
    return TriphoneContext(*map(int, phone_contexts(inv, phones)[state_index]))
