"""Raw EHR records, date-keyed visits and treatment-failure labels."""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field, replace
from datetime import date
from typing import IO, Iterable, Iterator

logger = logging.getLogger(__name__)

EXCLUSION_DAYS = 7
OUTCOME_WINDOW_DAYS = 365


class CodeType(str, enum.Enum):
    DIAGNOSIS = "Diagnosis"
    PROCEDURE = "Procedure"
    PRESCRIPTION = "Prescription"


# block order inside a visit: diagnoses, then procedures, then prescriptions
CODE_TYPES = (CodeType.DIAGNOSIS, CodeType.PROCEDURE, CodeType.PRESCRIPTION)


class LabelKind(str, enum.Enum):
    CASE = "Case"
    CONTROL = "Control"
    EXCLUDED = "Excluded"


class ParseError(ValueError):
    """A record line could not be parsed (strict mode only)."""


@dataclass(frozen=True)
class RawRecord:
    patient_id: str
    date: date
    code: str
    code_type: CodeType

    def __post_init__(self):
        if not self.patient_id:
            raise ValueError("patient_id must be nonempty")
        if not self.code:
            raise ValueError("code must be nonempty")

    def to_json(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "date": self.date.isoformat(),
            "code": self.code,
            "code_type": self.code_type.value,
        }


@dataclass(frozen=True)
class Visit:
    date: date
    diagnoses: tuple[str, ...] = ()
    procedures: tuple[str, ...] = ()
    prescriptions: tuple[str, ...] = ()

    def __post_init__(self):
        if not (self.diagnoses or self.procedures or self.prescriptions):
            raise ValueError(f"visit on {self.date} has no codes")

    @property
    def blocks(self) -> tuple[tuple[str, ...], tuple[str, ...], tuple[str, ...]]:
        return (self.diagnoses, self.procedures, self.prescriptions)

    def codes(self) -> list[tuple[str, CodeType]]:
        """Codes in ingestion order, D block then O block then P block."""
        return [(c, t) for t, block in zip(CODE_TYPES, self.blocks) for c in block]

    def __len__(self) -> int:
        return sum(len(b) for b in self.blocks)


@dataclass(frozen=True)
class LabelOutcome:
    kind: LabelKind
    index_date: date | None = None
    event_date: date | None = None

    def to_json(self) -> dict:
        return {
            "kind": self.kind.value,
            "index_date": self.index_date.isoformat() if self.index_date else None,
            "event_date": self.event_date.isoformat() if self.event_date else None,
        }

    @classmethod
    def from_json(cls, obj: dict) -> LabelOutcome:
        return cls(
            kind=LabelKind(obj["kind"]),
            index_date=_opt_date(obj.get("index_date")),
            event_date=_opt_date(obj.get("event_date")),
        )


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    visits: tuple[Visit, ...]
    label: LabelOutcome | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.visits:
            raise ValueError(f"patient {self.patient_id} has no visits")
        for a, b in zip(self.visits, self.visits[1:]):
            if not a.date < b.date:
                raise ValueError(f"patient {self.patient_id}: visits not strictly ascending")

    def with_label(self, label: LabelOutcome | None) -> PatientRecord:
        return replace(self, label=label)

    def n_codes(self) -> int:
        return sum(len(v) for v in self.visits)

    def to_json(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "visits": [
                {
                    "date": v.date.isoformat(),
                    "diagnoses": list(v.diagnoses),
                    "procedures": list(v.procedures),
                    "prescriptions": list(v.prescriptions),
                }
                for v in self.visits
            ],
            "label": self.label.to_json() if self.label else None,
        }

    @classmethod
    def from_json(cls, obj: dict) -> PatientRecord:
        visits = tuple(
            Visit(
                date=date.fromisoformat(v["date"]),
                diagnoses=tuple(v.get("diagnoses", ())),
                procedures=tuple(v.get("procedures", ())),
                prescriptions=tuple(v.get("prescriptions", ())),
            )
            for v in obj["visits"]
        )
        label = LabelOutcome.from_json(obj["label"]) if obj.get("label") else None
        return cls(obj["patient_id"], visits, label)

    def to_records(self) -> list[RawRecord]:
        return [
            RawRecord(self.patient_id, v.date, c, t) for v in self.visits for c, t in v.codes()
        ]


def _opt_date(s: str | None) -> date | None:
    return date.fromisoformat(s) if s else None


def _record_from_obj(obj: dict) -> RawRecord:
    if not isinstance(obj, dict):
        raise ValueError("record is not a JSON object")
    pid, day, code, ctype = (obj.get(k) for k in ("patient_id", "date", "code", "code_type"))
    if not all(isinstance(v, str) for v in (pid, day, code, ctype)):
        raise ValueError("missing or non-string field")
    return RawRecord(pid, date.fromisoformat(day), code, CodeType(ctype))


@dataclass
class ParseResult:
    records: list[RawRecord]
    skipped: int = 0


def parse_records(stream: IO[str] | IO[bytes] | Iterable[str], strict: bool = False) -> ParseResult:
    """Parse JSON Lines records, skipping (and counting) malformed lines.

    With ``strict=True`` the first malformed line raises :class:`ParseError`.
    Blank lines are ignored and never counted as skipped.
    """
    records: list[RawRecord] = []
    skipped = 0
    for lineno, line in enumerate(stream, 1):
        if isinstance(line, bytes):
            line = line.decode("utf-8")
        if not line.strip():
            continue
        try:
            records.append(_record_from_obj(json.loads(line)))
        except ValueError as exc:  # JSONDecodeError is a ValueError
            if strict:
                raise ParseError(f"line {lineno}: {exc}") from exc
            skipped += 1
            logger.debug("skipping line %d: %s", lineno, exc)
    if skipped:
        logger.warning("skipped %d malformed record line(s)", skipped)
    return ParseResult(records, skipped)


def group_visits(records: Iterable[RawRecord]) -> list[PatientRecord]:
    """Group records into per-patient visits keyed by date.

    Patients come out in order of first appearance. Within a visit each type
    block keeps input order; exact duplicate records are collapsed.
    """
    by_patient: dict[str, dict[date, dict[CodeType, list[str]]]] = {}
    seen: set[RawRecord] = set()
    for rec in records:
        if rec in seen:
            continue
        seen.add(rec)
        day_blocks = by_patient.setdefault(rec.patient_id, {}).setdefault(
            rec.date, {t: [] for t in CODE_TYPES}
        )
        day_blocks[rec.code_type].append(rec.code)

    patients = []
    for pid, days in by_patient.items():
        visits = tuple(
            Visit(
                d,
                tuple(days[d][CodeType.DIAGNOSIS]),
                tuple(days[d][CodeType.PROCEDURE]),
                tuple(days[d][CodeType.PRESCRIPTION]),
            )
            for d in sorted(days)
        )
        patients.append(PatientRecord(pid, visits))
    return patients


def derive_label(
    patient: PatientRecord, index_codes: set[str], event_codes: set[str]
) -> LabelOutcome:
    """Label a patient relative to the first index-drug prescription.

    Only event codes in the diagnosis or procedure blocks count. The earliest
    event on or after the index date decides: 0..7 days is Excluded,
    8..365 days is Case, anything later (or none) is Control.
    """
    if not index_codes or not event_codes:
        raise ValueError("index_codes and event_codes must be nonempty")
    index_date = next(
        (v.date for v in patient.visits if index_codes.intersection(v.prescriptions)), None
    )
    if index_date is None:
        return LabelOutcome(LabelKind.EXCLUDED)

    for v in patient.visits:
        if v.date < index_date:
            continue
        if event_codes.intersection(v.diagnoses) or event_codes.intersection(v.procedures):
            delta = (v.date - index_date).days
            if delta <= EXCLUSION_DAYS:
                return LabelOutcome(LabelKind.EXCLUDED, index_date, v.date)
            if delta <= OUTCOME_WINDOW_DAYS:
                return LabelOutcome(LabelKind.CASE, index_date, v.date)
            break
    return LabelOutcome(LabelKind.CONTROL, index_date)


@dataclass(frozen=True)
class LabelConfig:
    index_codes: frozenset[str]
    event_codes: frozenset[str]

    @classmethod
    def from_json(cls, obj: dict) -> LabelConfig:
        cfg = cls(frozenset(obj["index_codes"]), frozenset(obj["event_codes"]))
        if not cfg.index_codes or not cfg.event_codes:
            raise ValueError("label config needs nonempty index_codes and event_codes")
        return cfg

    @classmethod
    def load(cls, path) -> LabelConfig:
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))

    def to_json(self) -> dict:
        return {"index_codes": sorted(self.index_codes), "event_codes": sorted(self.event_codes)}


def label_patients(patients: Iterable[PatientRecord], cfg: LabelConfig) -> list[PatientRecord]:
    return [
        p.with_label(derive_label(p, set(cfg.index_codes), set(cfg.event_codes))) for p in patients
    ]


def load_patients(path, strict: bool = False) -> list[PatientRecord]:
    """Read a raw-record JSONL file and group it into patients."""
    with open(path, "rb") as fh:
        result = parse_records(fh, strict=strict)
    return group_visits(result.records)


def write_records(path, records: Iterable[RawRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json()) + "\n")


def iter_patient_jsonl(path) -> Iterator[PatientRecord]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield PatientRecord.from_json(json.loads(line))
