"""Grid runner for the augmentation-factor experiments.

Two modes share one grid of (alpha, label_fraction, seed) cells:

* ``pretrain``: alpha is the pre-training augmentation factor; fine-tuning
  uses ``fixed_alpha``.
* ``finetune``: pre-training uses ``fixed_alpha``; alpha is the fine-tuning
  augmentation factor.

Each seed gets its own pre-trained checkpoint (pre-training seed = cell seed).
Results are written as CSV in spec order, so reruns are byte-identical.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Literal, Sequence

from .records import LabelConfig, LabelKind, PatientRecord, label_patients, load_patients
from .synth import SynthConfig, gen_corpus
from .tinyformer import Checkpoint
from .trainer import RunConfig, SplitPlan, finetune, pretrain, split_patients

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("alpha", "label_fraction", "seed", "auc", "auc_tta")
SUMMARY_COLUMNS = ("alpha", "label_fraction", "n", "median_auc", "median_auc_tta", "median_tta_gain")
FAILURE_MARKER = "# FAILED"


class ExperimentError(RuntimeError):
    def __init__(self, where: str, cause: BaseException):
        super().__init__(f"{where} failed: {cause!r}")
        self.where = where


def default_pretrain_config() -> RunConfig:
    return RunConfig(phase="pretrain", epochs=6, lr=1e-3, batch_size=32)


def default_finetune_config() -> RunConfig:
    return RunConfig(phase="finetune", epochs=10, lr=3e-4, batch_size=32, tta_alpha=8)


@dataclass(frozen=True)
class ExperimentSpec:
    alphas: tuple[int, ...] = (1, 8)
    label_fractions: tuple[float, ...] = (1.0,)
    n_seeds: int = 3
    mode: Literal["pretrain", "finetune"] = "pretrain"
    fixed_alpha: int = 1
    first_seed: int = 0
    # corpus: a synthetic config, or raw-record files plus a label config
    synth: SynthConfig | None = field(default_factory=SynthConfig)
    pretrain_path: str | None = None
    labeled_path: str | None = None
    label_config_path: str | None = None
    pretrain_config: RunConfig = field(default_factory=default_pretrain_config)
    finetune_config: RunConfig = field(default_factory=default_finetune_config)
    split_ratio: float = 0.8
    split_seed: int = 0
    drop_event_codes: bool = True

    def __post_init__(self):
        if not self.alphas or not self.label_fractions:
            raise ValueError("alphas and label_fractions must be nonempty")
        if self.n_seeds < 1:
            raise ValueError("n_seeds must be >= 1")
        if min(self.alphas) < 1 or self.fixed_alpha < 1:
            raise ValueError("augmentation factors must be >= 1")
        if not all(0 < f <= 1 for f in self.label_fractions):
            raise ValueError("label fractions must be in (0, 1]")
        if self.mode not in ("pretrain", "finetune"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.synth is None and not (self.pretrain_path and self.labeled_path and self.label_config_path):
            raise ValueError("give either a synth config or pretrain/labeled/label-config paths")

    @property
    def seeds(self) -> list[int]:
        return list(range(self.first_seed, self.first_seed + self.n_seeds))

    def cells(self) -> list[tuple[int, float, int]]:
        return [(a, f, s) for a in self.alphas for f in self.label_fractions for s in self.seeds]

    def to_json(self) -> dict:
        obj = asdict(self)
        obj["synth"] = self.synth.to_json() if self.synth else None
        obj["pretrain_config"] = self.pretrain_config.to_json()
        obj["finetune_config"] = self.finetune_config.to_json()
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> ExperimentSpec:
        obj = dict(obj)
        for key in ("alphas", "label_fractions"):
            if key in obj:
                obj[key] = tuple(obj[key])
        if obj.get("synth") is not None:
            obj["synth"] = SynthConfig.from_json(obj["synth"])
        for key in ("pretrain_config", "finetune_config"):
            if isinstance(obj.get(key), dict):
                obj[key] = RunConfig.from_json(obj[key])
        return cls(**obj)

    @classmethod
    def load(cls, path) -> ExperimentSpec:
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def pretrain_trend_spec(**overrides) -> ExperimentSpec:
    """Pre-training alpha sweep at full label data; fine-tuning without augmentation."""
    return replace(ExperimentSpec(mode="pretrain", alphas=(1, 8), label_fractions=(1.0,),
                                  fixed_alpha=1), **overrides)  # fmt: skip


def scarcity_trend_spec(**overrides) -> ExperimentSpec:
    """Fine-tuning alpha sweep at scarce and full label data on an alpha-8 pre-trained model."""
    return replace(ExperimentSpec(mode="finetune", alphas=(1, 8), label_fractions=(0.1, 1.0),
                                  fixed_alpha=8), **overrides)  # fmt: skip


@dataclass(frozen=True)
class Row:
    alpha: int
    label_fraction: float
    seed: int
    auc: float
    auc_tta: float | None

    @property
    def tta_gain(self) -> float | None:
        return None if self.auc_tta is None else self.auc_tta - self.auc


@dataclass
class ExperimentResult:
    rows: list[Row]
    summary: list[dict]
    csv_text: str
    summary_text: str


# -- corpus ---------------------------------------------------------------------------


def load_corpus(spec: ExperimentSpec) -> tuple[list[PatientRecord], list[PatientRecord], LabelConfig]:
    if spec.synth is not None:
        c = gen_corpus(spec.synth)
        return c.pretrain, c.labeled, c.label_config
    cfg = LabelConfig.load(spec.label_config_path)
    return load_patients(spec.pretrain_path), label_patients(load_patients(spec.labeled_path), cfg), cfg


def _fmt(x: float | None) -> str:
    return "" if x is None else f"{x:.6f}"


def _rows_csv(rows: Sequence[Row]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([r.alpha, r.label_fraction, r.seed, _fmt(r.auc), _fmt(r.auc_tta)])
    return buf.getvalue()


def summarize(rows: Sequence[Row], spec: ExperimentSpec) -> list[dict]:
    out = []
    for a in spec.alphas:
        for f in spec.label_fractions:
            cell = [r for r in rows if r.alpha == a and r.label_fraction == f]
            if not cell:
                continue
            tta = [r.auc_tta for r in cell if r.auc_tta is not None]
            gains = [r.tta_gain for r in cell if r.tta_gain is not None]
            out.append({
                "alpha": a,
                "label_fraction": f,
                "n": len(cell),
                "median_auc": statistics.median(r.auc for r in cell),
                "median_auc_tta": statistics.median(tta) if tta else None,
                "median_tta_gain": statistics.median(gains) if gains else None,
            })  # fmt: skip
    return out


def _summary_csv(summary: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for s in summary:
        w.writerow([s["alpha"], s["label_fraction"], s["n"], _fmt(s["median_auc"]),
                    _fmt(s["median_auc_tta"]), _fmt(s["median_tta_gain"])])  # fmt: skip
    return buf.getvalue()


# -- execution ------------------------------------------------------------------------

# set once per process so worker pools can fork without pickling the corpus
_STATE: dict = {}


def _cache_key(spec: ExperimentSpec, cfg: RunConfig) -> str:
    ident = {
        "corpus": spec.synth.to_json() if spec.synth else [spec.pretrain_path],
        "run": cfg.to_json(),
    }
    return hashlib.blake2b(json.dumps(ident, sort_keys=True).encode(), digest_size=10).hexdigest()


def _pretrain_job(alpha: int, seed: int) -> bytes:
    spec: ExperimentSpec = _STATE["spec"]
    cfg = replace(spec.pretrain_config, phase="pretrain", alpha=alpha, seed=seed)
    cache = _STATE.get("cache_dir")
    path = Path(cache) / f"pretrain-{_cache_key(spec, cfg)}.ckpt" if cache else None
    if path is not None and path.exists():
        logger.info("pretrain alpha=%d seed=%d: cached %s", alpha, seed, path)
        return path.read_bytes()
    logger.info("pretrain alpha=%d seed=%d", alpha, seed)
    data = pretrain(_STATE["pretrain"], cfg).to_bytes()
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        tmp.write_bytes(data)
        tmp.replace(path)
    return data


def _finetune_job(cell: tuple[int, float, int], base: bytes) -> Row:
    spec: ExperimentSpec = _STATE["spec"]
    alpha, frac, seed = cell
    ft_alpha = alpha if spec.mode == "finetune" else spec.fixed_alpha
    cfg = replace(spec.finetune_config, phase="finetune", alpha=ft_alpha, label_fraction=frac, seed=seed)
    res = finetune(_STATE["labeled"], Checkpoint.from_bytes(base), _STATE["plan"], cfg, _STATE["drop"])
    m = res.metrics
    logger.info("cell alpha=%d fraction=%g seed=%d: auc %.4f tta %s", alpha, frac, seed, m["auc"], m["auc_tta"])
    return Row(alpha, frac, seed, float(m["auc"]), None if m["auc_tta"] is None else float(m["auc_tta"]))


@dataclass
class _Outcome:
    value: object = None
    error: BaseException | None = None

    @classmethod
    def capture(cls, fn, args):
        try:
            return cls(fn(*args))
        except Exception as exc:  # reported with the failing cell
            return cls(error=exc)


def _run_jobs(fn, args: list[tuple], workers: int) -> list:
    """Run ``fn(*a)`` for every ``a``; results in input order. Exceptions propagate per job."""
    if workers <= 1:
        return [_Outcome.capture(fn, a) for a in args]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_Outcome.capture, fn, a) for a in args]
        return [f.result() for f in futures]


def prepare(spec: ExperimentSpec) -> SplitPlan:
    pre, labeled, label_cfg = load_corpus(spec)
    usable = [p for p in labeled if p.label and p.label.kind != LabelKind.EXCLUDED]
    plan = split_patients([p.patient_id for p in usable], spec.split_ratio, spec.split_seed)
    _STATE.update(
        spec=spec,
        pretrain=pre,
        labeled=usable,
        plan=plan,
        drop=label_cfg.event_codes if spec.drop_event_codes else frozenset(),
    )
    return plan


def run_experiment(
    spec: ExperimentSpec, out_dir=None, cache_dir=None, workers: int = 1
) -> ExperimentResult:
    """Run every cell; write ``results.csv``, ``summary.csv`` and ``split.json`` to ``out_dir``.

    A failing cell stops the run: rows finished so far are flushed, followed by a
    failure marker line naming the cell, and :class:`ExperimentError` is raised.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    plan = prepare(spec)
    _STATE["cache_dir"] = str(cache_dir) if cache_dir else None
    if out is not None:
        plan.save(out / "split.json")

    cells = spec.cells()
    if spec.mode == "pretrain":
        pt_keys = sorted({(a, s) for a, _, s in cells}, key=lambda k: (spec.alphas.index(k[0]), k[1]))
    else:
        pt_keys = [(spec.fixed_alpha, s) for s in spec.seeds]
    bases = {}
    for (alpha, seed), res in zip(pt_keys, _run_jobs(_pretrain_job, pt_keys, workers)):
        if res.error is not None:
            where = f"pretrain alpha={alpha} seed={seed}"
            _flush_failure(out, [], where, res.error)
            raise ExperimentError(where, res.error) from res.error
        bases[(alpha, seed)] = res.value

    def base_for(cell):
        a, _, s = cell
        return bases[(a, s) if spec.mode == "pretrain" else (spec.fixed_alpha, s)]

    outcomes = _run_jobs(_finetune_job, [(c, base_for(c)) for c in cells], workers)
    rows: list[Row] = []
    for (alpha, frac, seed), res in zip(cells, outcomes):
        if res.error is not None:
            where = f"cell alpha={alpha} label_fraction={frac} seed={seed}"
            _flush_failure(out, rows, where, res.error)
            raise ExperimentError(where, res.error) from res.error
        rows.append(res.value)

    summary = summarize(rows, spec)
    result = ExperimentResult(rows, summary, _rows_csv(rows), _summary_csv(summary))
    if out is not None:
        (out / "results.csv").write_text(result.csv_text, encoding="utf-8")
        (out / "summary.csv").write_text(result.summary_text, encoding="utf-8")
    return result


def _flush_failure(out: Path | None, rows: list[Row], where: str, exc: BaseException) -> None:
    if out is None:
        return
    text = _rows_csv(rows) + f"{FAILURE_MARKER} {where}: {exc!r}\n"
    (out / "results.csv").write_text(text, encoding="utf-8")
