"""Synthetic longitudinal EHR corpus with a planted, order-free label signal.

Patients draw visits from a mixture of latent "phenotype" topics. Some
patients receive a signal pair: two codes planted together in one visit.
Among index-drug patients, having both codes of any signal pair before the
observation cutoff makes treatment failure likely; a label-flip probability
adds noise. Case labels are then realised by writing an event code 8..365
days after the index prescription, so ``derive_label`` recovers them.

Nothing in the rule looks at the order of codes inside a visit.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from datetime import date, timedelta
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from .records import (
    CODE_TYPES,
    EXCLUSION_DAYS,
    OUTCOME_WINDOW_DAYS,
    CodeType,
    LabelConfig,
    PatientRecord,
    RawRecord,
    derive_label,
    group_visits,
)

INDEX_CODE = "RX_INDEX"
EVENT_CODES = ("EV_MI", "EV_STROKE", "EV_STENT")
_EVENT_TYPES = {
    "EV_MI": CodeType.DIAGNOSIS,
    "EV_STROKE": CodeType.DIAGNOSIS,
    "EV_STENT": CodeType.PROCEDURE,
}
_PREFIX = {CodeType.DIAGNOSIS: "D", CodeType.PROCEDURE: "O", CodeType.PRESCRIPTION: "P"}
_EPOCH = date(2000, 1, 1)


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int = 2500
    index_fraction: float = 0.2
    mean_visits: float = 10.0  # shifted geometric, >= 1
    max_visits: int = 80
    mean_codes_per_visit: float = 2.7  # zero-truncated Poisson
    max_codes_per_visit: int = 10
    mean_gap_days: float = 40.0
    n_codes: tuple[int, int, int] = (60, 20, 40)  # diagnosis, procedure, prescription
    type_probs: tuple[float, float, float] = (0.5, 0.15, 0.35)
    n_topics: int = 6
    topic_concentration: float = 0.2
    # each pair: (diagnosis code, prescription code) planted into one visit
    signal_pairs: tuple[tuple[str, str], ...] = (("D_SIG_A", "P_SIG_A"), ("D_SIG_B", "P_SIG_B"))
    signal_rate: float = 0.3
    decoy_rate: float = 0.3  # plants only one code of a pair
    noise: float = 0.1
    excluded_rate: float = 0.02
    seed: int = 0

    def __post_init__(self):
        counts = (self.n_patients, self.mean_visits, self.max_visits, self.max_codes_per_visit,
                  self.n_topics, *self.n_codes)  # fmt: skip
        if min(counts) <= 0:
            raise ValueError("all counts must be positive")
        if not 0 <= self.noise < 0.5:
            raise ValueError("noise must be in [0, 0.5)")
        if not 1 <= self.mean_codes_per_visit < self.max_codes_per_visit:
            raise ValueError("mean_codes_per_visit must lie in [1, max_codes_per_visit)")
        if self.mean_visits < 1:
            raise ValueError("mean_visits must be >= 1")
        if self.signal_pairs and self.max_codes_per_visit < 2:
            raise ValueError("a signal pair needs visits with room for 2 codes")
        for name in ("index_fraction", "signal_rate", "decoy_rate", "excluded_rate"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.signal_rate + self.decoy_rate > 1:
            raise ValueError("signal_rate + decoy_rate must not exceed 1")
        if abs(sum(self.type_probs) - 1) > 1e-9:
            raise ValueError("type_probs must sum to 1")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> SynthConfig:
        obj = dict(obj)
        if "n_codes" in obj:
            obj["n_codes"] = tuple(obj["n_codes"])
        if "type_probs" in obj:
            obj["type_probs"] = tuple(obj["type_probs"])
        if "signal_pairs" in obj:
            obj["signal_pairs"] = tuple(tuple(p) for p in obj["signal_pairs"])
        return cls(**obj)

    def label_config(self) -> LabelConfig:
        return LabelConfig(frozenset([INDEX_CODE]), frozenset(EVENT_CODES))


@dataclass
class SynthCorpus:
    pretrain: list[PatientRecord]
    labeled: list[PatientRecord]
    label_config: LabelConfig
    stats: dict = field(default_factory=dict)


def truncated_poisson_rate(mean: float, upper: int) -> float:
    """Poisson rate whose {1..upper}-truncated distribution has the given mean."""
    ks = np.arange(1, upper + 1)
    logfact = np.array([math.lgamma(k + 1) for k in ks])

    def gap(lam):
        w = np.exp(ks * math.log(lam) - logfact)
        return (ks * w).sum() / w.sum() - mean

    return brentq(gap, 1e-6, 10.0 * upper)


class _Generator:
    def __init__(self, cfg: SynthConfig):
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 0])
        self.codes = {
            t: [f"{_PREFIX[t]}{i:03d}" for i in range(n)] for t, n in zip(CODE_TYPES, cfg.n_codes)
        }
        # topic -> type -> distribution over that type's codes
        self.topics = [
            {t: rng.dirichlet(np.full(n, cfg.topic_concentration)) for t, n in
             zip(CODE_TYPES, cfg.n_codes)}
            for _ in range(cfg.n_topics)
        ]  # fmt: skip
        self.lam = truncated_poisson_rate(cfg.mean_codes_per_visit, cfg.max_codes_per_visit)
        ks = np.arange(1, cfg.max_codes_per_visit + 1)
        w = np.exp(ks * math.log(self.lam) - np.array([math.lgamma(k + 1) for k in ks]))
        self.count_probs = w / w.sum()

    def visits(self, rng: np.random.Generator) -> list[tuple[date, dict[CodeType, list[str]]]]:
        cfg = self.cfg
        n_visits = min(cfg.max_visits, int(rng.geometric(1.0 / cfg.mean_visits)))
        mixture = rng.dirichlet(np.full(cfg.n_topics, 0.5))
        day = _EPOCH + timedelta(days=int(rng.integers(0, 8 * 365)))
        out = []
        for _ in range(n_visits):
            topic = self.topics[rng.choice(cfg.n_topics, p=mixture)]
            n = 1 + int(rng.choice(len(self.count_probs), p=self.count_probs))
            per_type = rng.multinomial(n, cfg.type_probs)
            blocks = {}
            for t, k in zip(CODE_TYPES, per_type):
                k = min(int(k), len(self.codes[t]))
                picks = rng.choice(len(self.codes[t]), size=k, replace=False, p=topic[t])
                blocks[t] = [self.codes[t][i] for i in picks]
            out.append((day, blocks))
            day += timedelta(days=1 + int(rng.geometric(1.0 / cfg.mean_gap_days)))
        return out

    def plant_signal(self, rng, visits, upto: int) -> None:
        """Plant a full signal pair, one decoy code, or nothing into ``visits[:upto]``."""
        cfg = self.cfg
        if not cfg.signal_pairs:
            return
        u = rng.random()
        pair = cfg.signal_pairs[int(rng.integers(len(cfg.signal_pairs)))]
        target = visits[int(rng.integers(upto))][1]
        if u < cfg.signal_rate:
            _add(target, CodeType.DIAGNOSIS, pair[0])
            _add(target, CodeType.PRESCRIPTION, pair[1])
        elif u < cfg.signal_rate + cfg.decoy_rate:
            half = int(rng.integers(2))
            _add(target, (CodeType.DIAGNOSIS, CodeType.PRESCRIPTION)[half], pair[half])


def _add(blocks: dict[CodeType, list[str]], ctype: CodeType, code: str) -> None:
    if code not in blocks[ctype]:
        blocks[ctype].append(code)


def _records(pid: str, visits) -> list[RawRecord]:
    return [
        RawRecord(pid, day, code, t) for day, blocks in visits for t in CODE_TYPES
        for code in blocks[t]
    ]  # fmt: skip


def signal_present(patient: PatientRecord, pairs, cutoff: date | None = None) -> bool:
    """True if both codes of some pair occur in visits dated <= ``cutoff``."""
    seen: set[str] = set()
    for v in patient.visits:
        if cutoff is not None and v.date > cutoff:
            break
        for block in v.blocks:
            seen.update(block)
    return any(a in seen and b in seen for a, b in pairs)


def gen_corpus(cfg: SynthConfig) -> SynthCorpus:
    gen = _Generator(cfg)
    n_labeled = round(cfg.index_fraction * cfg.n_patients)
    label_cfg = cfg.label_config()
    children = np.random.SeedSequence([cfg.seed, 1]).spawn(cfg.n_patients)
    width = len(str(cfg.n_patients))
    pretrain, labeled = [], []

    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        pid = f"S{i:0{width}d}"
        visits = gen.visits(rng)
        if i >= n_labeled:
            gen.plant_signal(rng, visits, len(visits))
            pretrain.extend(group_visits(_records(pid, visits)))
            continue

        # index prescription lands on a visit in the first two thirds of the history
        idx = int(rng.integers(max(1, math.ceil(2 * len(visits) / 3))))
        index_day = visits[idx][0]
        _add(visits[idx][1], CodeType.PRESCRIPTION, INDEX_CODE)
        cutoff = index_day + timedelta(days=OUTCOME_WINDOW_DAYS)
        in_window = sum(1 for d, _ in visits if d <= cutoff)
        gen.plant_signal(rng, visits, in_window)
        (patient,) = group_visits(_records(pid, visits))

        case = signal_present(patient, cfg.signal_pairs, cutoff)
        if rng.random() < cfg.noise:
            case = not case
        if rng.random() < cfg.excluded_rate:
            lag = int(rng.integers(0, EXCLUSION_DAYS + 1))
        elif case:
            lag = int(rng.integers(EXCLUSION_DAYS + 1, OUTCOME_WINDOW_DAYS + 1))
        else:
            lag = None
        if lag is not None:
            code = EVENT_CODES[int(rng.integers(len(EVENT_CODES)))]
            ev_day = index_day + timedelta(days=lag)
            (patient,) = group_visits(
                patient.to_records() + [RawRecord(pid, ev_day, code, _EVENT_TYPES[code])]
            )
        labeled.append(
            patient.with_label(derive_label(patient, set(label_cfg.index_codes),
                                            set(label_cfg.event_codes)))
        )  # fmt: skip

    return SynthCorpus(pretrain, labeled, label_cfg, corpus_stats(pretrain + labeled))


def corpus_stats(patients: list[PatientRecord]) -> dict:
    visits = np.array([len(p.visits) for p in patients])
    codes = np.array([len(v) for p in patients for v in p.visits])
    return {
        "n_patients": len(patients),
        "n_visits": int(visits.sum()),
        "visits_per_patient": {"mean": float(visits.mean()), "median": float(np.median(visits)),
                               "max": int(visits.max()), "min": int(visits.min())},
        "codes_per_visit": {"mean": float(codes.mean()), "median": float(np.median(codes)),
                            "max": int(codes.max()), "min": int(codes.min())},
    }  # fmt: skip


def write_corpus(corpus: SynthCorpus, out_dir) -> dict[str, str]:
    """Write pretrain/labeled raw-record JSONL plus the label config."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "pretrain": out / "pretrain.jsonl",
        "labeled": out / "labeled.jsonl",
        "labels": out / "label_config.json",
    }
    for key in ("pretrain", "labeled"):
        with open(paths[key], "w", encoding="utf-8") as fh:
            for p in getattr(corpus, key):
                for rec in p.to_records():
                    fh.write(json.dumps(rec.to_json()) + "\n")
    with open(paths["labels"], "w", encoding="utf-8") as fh:
        json.dump(corpus.label_config.to_json(), fh, indent=1)
    return {k: str(v) for k, v in paths.items()}
