"""Within-visit permutation augmentation.

Visit order and the diagnosis/procedure/prescription block order are fixed;
codes permute freely inside each block. A visit with blocks of sizes
``d, o, p`` therefore has ``d! * o! * p!`` orderings and a patient has the
product of those over visits. Individual orderings are addressed by a
per-block lexicographic permutation rank (Lehmer code), so rank 0 everywhere
is the original ingestion order.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
import random
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Sequence

from .records import CODE_TYPES, CodeType, LabelOutcome, PatientRecord, Visit

DEFAULT_CAP = 2**63 - 1
# below this multiple of alpha, enumerate the space instead of rejection sampling
ENUMERATE_FACTOR = 64
MAX_REJECTIONS_PER_DRAW = 1000


class VisitRank(NamedTuple):
    d_rank: int = 0
    o_rank: int = 0
    p_rank: int = 0


SequenceRank = tuple[VisitRank, ...]


@dataclass(frozen=True)
class CodeSequence:
    patient_id: str
    codes: tuple[tuple[str, CodeType], ...]
    rank: SequenceRank
    label: LabelOutcome | None = None

    @property
    def tokens(self) -> list[str]:
        return [c for c, _ in self.codes]

    def to_json(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "rank": [list(r) for r in self.rank],
            "codes": [c for c, _ in self.codes],
            "code_types": [t.value for _, t in self.codes],
            "label": self.label.to_json() if self.label else None,
        }

    @classmethod
    def from_json(cls, obj: dict) -> CodeSequence:
        codes = tuple(zip(obj["codes"], (CodeType(t) for t in obj["code_types"])))
        label = LabelOutcome.from_json(obj["label"]) if obj.get("label") else None
        return cls(obj["patient_id"], codes, tuple(VisitRank(*r) for r in obj["rank"]), label)


@dataclass(frozen=True)
class AugmentConfig:
    alpha: int = 1
    seed: int = 0
    include_identity: bool = True

    def __post_init__(self):
        if self.alpha < 1:
            raise ValueError(f"alpha must be >= 1, got {self.alpha}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass(frozen=True)
class SequenceCount:
    """Result of :func:`total_sequence_count`; ``value`` is a lower bound when saturated."""

    value: int
    saturated: bool = False


def visit_perm_count(visit: Visit) -> int:
    return math.prod(math.factorial(len(b)) for b in visit.blocks)


def total_sequence_count(patient: PatientRecord, cap: int = DEFAULT_CAP) -> SequenceCount:
    if cap < 1:
        raise ValueError("cap must be positive")
    total = 1
    for visit in patient.visits:
        total *= visit_perm_count(visit)
        if total > cap:
            return SequenceCount(total, saturated=True)
    return SequenceCount(total)


def unrank_permutation(items: Sequence, rank: int) -> list:
    """Return the ``rank``-th lexicographic permutation of ``items`` by position."""
    k = len(items)
    if not 0 <= rank < math.factorial(k):
        raise ValueError(f"rank {rank} out of range for {k} items")
    pool = list(items)
    out = []
    for i in range(k - 1, -1, -1):
        idx, rank = divmod(rank, math.factorial(i))
        out.append(pool.pop(idx))
    return out


def rank_permutation(perm: Sequence[int]) -> int:
    """Inverse of :func:`unrank_permutation` for a permutation of ``range(k)``."""
    pool = sorted(perm)
    rank = 0
    for i, x in enumerate(perm):
        idx = pool.index(x)
        rank += idx * math.factorial(len(perm) - 1 - i)
        pool.pop(idx)
    return rank


def unrank_visit(visit: Visit, rank: VisitRank) -> list[tuple[str, CodeType]]:
    out: list[tuple[str, CodeType]] = []
    for ctype, block, r in zip(CODE_TYPES, visit.blocks, rank):
        out.extend((c, ctype) for c in unrank_permutation(block, r))
    return out


def unrank_sequence(patient: PatientRecord, rank: SequenceRank) -> CodeSequence:
    if len(rank) != len(patient.visits):
        raise ValueError("rank length does not match visit count")
    codes = tuple(c for v, r in zip(patient.visits, rank) for c in unrank_visit(v, r))
    return CodeSequence(patient.patient_id, codes, tuple(rank), patient.label)


def identity_sequence(patient: PatientRecord) -> CodeSequence:
    return unrank_sequence(patient, tuple(VisitRank() for _ in patient.visits))


def _radices(patient: PatientRecord) -> list[int]:
    return [math.factorial(len(b)) for v in patient.visits for b in v.blocks]


def _to_rank(digits: Sequence[int]) -> SequenceRank:
    return tuple(VisitRank(*digits[i : i + 3]) for i in range(0, len(digits), 3))


def iter_ranks(patient: PatientRecord) -> Iterator[SequenceRank]:
    """All sequence ranks in mixed-radix order; the first is the identity."""
    for digits in itertools.product(*(range(r) for r in _radices(patient))):
        yield _to_rank(digits)


def patient_seed(patient_id: str, seed: int) -> int:
    """Stable per-patient seed, independent of process hash randomization."""
    h = hashlib.blake2b(f"{seed}:{patient_id}".encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def sample_augmentations(patient: PatientRecord, cfg: AugmentConfig) -> list[CodeSequence]:
    """Draw ``min(alpha, total)`` distinct orderings of a patient's codes.

    With ``include_identity`` the original order is always element 0. The
    remaining orderings are uniform without replacement over the whole space.
    Distinctness is judged on the resulting code lists, so repeated codes in a
    block cannot produce two identical outputs.
    """
    rng = random.Random(patient_seed(patient.patient_id, cfg.seed))
    count = total_sequence_count(patient, cap=ENUMERATE_FACTOR * cfg.alpha)

    if not count.saturated:
        distinct: dict[tuple, CodeSequence] = {}
        for rank in iter_ranks(patient):
            seq = unrank_sequence(patient, rank)
            distinct.setdefault(seq.codes, seq)
        pool = list(distinct.values())
        if len(pool) <= cfg.alpha:
            return pool
        if cfg.include_identity:
            return [pool[0]] + rng.sample(pool[1:], cfg.alpha - 1)
        return rng.sample(pool, cfg.alpha)

    radices = _radices(patient)
    out: list[CodeSequence] = []
    seen: set[tuple] = set()
    if cfg.include_identity:
        ident = identity_sequence(patient)
        out.append(ident)
        seen.add(ident.codes)
    attempts = 0
    while len(out) < cfg.alpha and attempts < MAX_REJECTIONS_PER_DRAW * cfg.alpha:
        attempts += 1
        seq = unrank_sequence(patient, _to_rank([rng.randrange(r) for r in radices]))
        if seq.codes not in seen:
            seen.add(seq.codes)
            out.append(seq)
    return out


def augment_corpus(
    patients: Sequence[PatientRecord], cfg: AugmentConfig
) -> list[CodeSequence]:
    return [s for p in patients for s in sample_augmentations(p, cfg)]


def write_sequences(path, seqs: Sequence[CodeSequence]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in seqs:
            fh.write(json.dumps(s.to_json()) + "\n")


def read_sequences(path) -> list[CodeSequence]:
    with open(path, encoding="utf-8") as fh:
        return [CodeSequence.from_json(json.loads(line)) for line in fh if line.strip()]
