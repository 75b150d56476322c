"""Code vocabulary, fixed-length token windows and masked-LM pairs."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .augment import CodeSequence

PAD_ID = 0
MASK_ID = 1
UNK_ID = 2
RESERVED = {"[PAD]": PAD_ID, "[MASK]": MASK_ID, "[UNK]": UNK_ID}
N_RESERVED = len(RESERVED)
IGNORE = -100

MLM_RATE = 0.15
# of the selected positions: replace with [MASK], with a random code, keep
MLM_SPLIT = (0.8, 0.1, 0.1)


class Vocabulary:
    """Bijection between codes and ids; ids 0..2 are PAD, MASK, UNK."""

    def __init__(self, codes: Sequence[str]):
        if len(set(codes)) != len(codes):
            raise ValueError("duplicate codes in vocabulary")
        clash = set(codes) & RESERVED.keys()
        if clash:
            raise ValueError(f"codes collide with reserved tokens: {sorted(clash)}")
        self._codes = list(codes)
        self._ids = {c: i + N_RESERVED for i, c in enumerate(self._codes)}

    def __len__(self) -> int:
        return N_RESERVED + len(self._codes)

    def __contains__(self, code: str) -> bool:
        return code in self._ids

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._codes == other._codes

    @property
    def codes(self) -> list[str]:
        return list(self._codes)

    def id_of(self, code: str) -> int:
        return self._ids.get(code, UNK_ID)

    def code_of(self, idx: int) -> str:
        if idx < N_RESERVED:
            return next(k for k, v in RESERVED.items() if v == idx)
        return self._codes[idx - N_RESERVED]

    def to_json(self) -> dict:
        return {"reserved": dict(RESERVED), "codes": {c: i for c, i in self._ids.items()}}

    @classmethod
    def from_json(cls, obj: dict) -> Vocabulary:
        if obj.get("reserved", RESERVED) != RESERVED:
            raise ValueError("incompatible reserved-token manifest")
        by_id = sorted(obj["codes"].items(), key=lambda kv: kv[1])
        if [i for _, i in by_id] != list(range(N_RESERVED, N_RESERVED + len(by_id))):
            raise ValueError("vocabulary ids are not contiguous")
        return cls([c for c, _ in by_id])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1)

    @classmethod
    def load(cls, path) -> Vocabulary:
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def build_vocab(corpus: Iterable[CodeSequence]) -> Vocabulary:
    seen: dict[str, None] = {}
    n = 0
    for seq in corpus:
        n += 1
        for code, _ in seq.codes:
            seen.setdefault(code, None)
    if n == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    return Vocabulary(list(seen))


@dataclass(frozen=True)
class TokenSeq:
    ids: np.ndarray  # int64 [L]
    attn_mask: np.ndarray  # int8 [L], 1 = real token

    @property
    def real_len(self) -> int:
        return int(self.attn_mask.sum())

    def __len__(self) -> int:
        return len(self.ids)


def encode_window(seq: CodeSequence, vocab: Vocabulary, seq_len: int) -> TokenSeq:
    """Map codes to ids, keeping the most recent ``seq_len`` codes."""
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    ids = [vocab.id_of(c) for c, _ in seq.codes][-seq_len:]
    out = np.full(seq_len, PAD_ID, dtype=np.int64)
    out[: len(ids)] = ids
    mask = np.zeros(seq_len, dtype=np.int8)
    mask[: len(ids)] = 1
    return TokenSeq(out, mask)


def decode_window(tokens: TokenSeq, vocab: Vocabulary) -> list[str]:
    return [vocab.code_of(int(i)) for i in tokens.ids[: tokens.real_len]]


@dataclass(frozen=True)
class MlmExample:
    inputs: TokenSeq
    targets: np.ndarray  # int64 [L], IGNORE where not selected

    @property
    def mask_positions(self) -> np.ndarray:
        return np.flatnonzero(self.targets != IGNORE)


def apply_mlm_mask(
    seq: TokenSeq, vocab_size: int, rate: float = MLM_RATE, rng: np.random.Generator | int = 0
) -> MlmExample:
    """BERT-style masking: select each real position with prob ``rate``,
    then 80% -> [MASK], 10% -> random code id, 10% unchanged.

    At least one position is always selected (the draw is repeated until so).
    """
    if not 0 < rate < 1:
        raise ValueError("rate must be in (0, 1)")
    n = seq.real_len
    if n == 0:
        raise ValueError("cannot mask an all-pad sequence")
    if vocab_size <= N_RESERVED:
        raise ValueError("vocabulary has no codes to sample replacements from")
    rng = np.random.default_rng(rng)
    while True:
        selected = np.flatnonzero(rng.random(n) < rate)
        if selected.size:
            break
    targets = np.full(len(seq), IGNORE, dtype=np.int64)
    targets[selected] = seq.ids[selected]
    ids = seq.ids.copy()
    action = rng.random(selected.size)
    to_mask = selected[action < MLM_SPLIT[0]]
    to_rand = selected[(action >= MLM_SPLIT[0]) & (action < MLM_SPLIT[0] + MLM_SPLIT[1])]
    ids[to_mask] = MASK_ID
    ids[to_rand] = rng.integers(N_RESERVED, vocab_size, size=to_rand.size)
    return MlmExample(TokenSeq(ids, seq.attn_mask), targets)


def stack_windows(tokens: Sequence[TokenSeq], trim: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Stack windows into ``(ids, mask)`` arrays of shape [B, T].

    With ``trim``, T is cut to the longest real length in the batch; pads are
    a suffix and masked out, so this changes no result at real positions.
    """
    ids = np.stack([t.ids for t in tokens])
    mask = np.stack([t.attn_mask for t in tokens]).astype(bool)
    if trim:
        width = max(1, int(mask.sum(axis=1).max()))
        ids, mask = ids[:, :width], mask[:, :width]
    return ids, mask
