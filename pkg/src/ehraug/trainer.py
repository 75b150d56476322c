"""Patient splits, augmentation-aware MLM pre-training and BCE fine-tuning."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from datetime import timedelta
from typing import Literal, Sequence

import numpy as np

from .augment import AugmentConfig, CodeSequence, augment_corpus, identity_sequence
from .metrics import metrics_report, score_examples, tta_examples
from .records import OUTCOME_WINDOW_DAYS, LabelKind, PatientRecord, Visit
from .seqpipe import MLM_RATE, TokenSeq, Vocabulary, apply_mlm_mask, build_vocab, encode_window, stack_windows
from .tinyformer import (
    AdamHyper,
    AdamState,
    Batch,
    Checkpoint,
    ModelConfig,
    Params,
    adam_step,
    init_params,
    loss_and_grads,
    predict_proba,
    reset_classifier,
)
from .tinyformer.model import forward_encoder, mlm_loss

logger = logging.getLogger(__name__)

# batches are formed from length-sorted runs of this many batches
BUCKET_BATCHES = 16


class TrainingError(RuntimeError):
    pass


# -- splits -------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitPlan:
    train_patient_ids: frozenset[str]
    test_patient_ids: frozenset[str]
    ratio: float
    seed: int

    def to_json(self) -> dict:
        return {
            "train_patient_ids": sorted(self.train_patient_ids),
            "test_patient_ids": sorted(self.test_patient_ids),
            "ratio": self.ratio,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> SplitPlan:
        plan = cls(
            frozenset(obj["train_patient_ids"]),
            frozenset(obj["test_patient_ids"]),
            obj["ratio"],
            obj["seed"],
        )
        if plan.train_patient_ids & plan.test_patient_ids:
            raise ValueError("split plan train and test sets overlap")
        return plan

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1)

    @classmethod
    def load(cls, path) -> SplitPlan:
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def split_patients(patient_ids: Sequence[str], ratio: float = 0.8, seed: int = 0) -> SplitPlan:
    """Seeded shuffle; the first ``ceil(ratio * N)`` ids (capped at N - 1) train."""
    ids = sorted(set(patient_ids))
    if len(ids) < 2:
        raise ValueError("need at least 2 patients to split")
    if not 0 < ratio < 1:
        raise ValueError("ratio must be in (0, 1)")
    order = np.random.default_rng([seed, 11]).permutation(len(ids))
    n_train = min(len(ids) - 1, max(1, math.ceil(ratio * len(ids) - 1e-9)))
    shuffled = [ids[i] for i in order]
    return SplitPlan(frozenset(shuffled[:n_train]), frozenset(shuffled[n_train:]), ratio, seed)


# -- task input ---------------------------------------------------------------------


def build_task_input(
    patient: PatientRecord, index_date=None, drop_codes: frozenset[str] = frozenset()
) -> PatientRecord:
    """Keep visits dated up to one year after the index date.

    ``drop_codes`` are removed from every visit (visits left empty disappear).
    """
    if index_date is None:
        index_date = patient.label.index_date if patient.label else None
    if index_date is None:
        raise ValueError(f"patient {patient.patient_id} has no index date")
    cutoff = index_date + timedelta(days=OUTCOME_WINDOW_DAYS)
    visits = []
    for v in patient.visits:
        if v.date > cutoff:
            break
        blocks = [tuple(c for c in b if c not in drop_codes) for b in v.blocks]
        if any(blocks):
            visits.append(Visit(v.date, *blocks))
    if not visits:
        raise ValueError(f"patient {patient.patient_id}: no visits left in the task window")
    return PatientRecord(patient.patient_id, tuple(visits), patient.label)


# -- configs ------------------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    phase: Literal["pretrain", "finetune"] = "pretrain"
    alpha: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    label_fraction: float = 1.0
    seed: int = 0
    mlm_rate: float = MLM_RATE
    val_fraction: float = 0.2
    patience: int = 3
    pos_weight: float = 1.0
    tta_alpha: int = 8

    def __post_init__(self):
        if self.phase not in ("pretrain", "finetune"):
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.alpha < 1:
            raise ValueError("alpha must be >= 1")
        if not 0 < self.label_fraction <= 1:
            raise ValueError("label_fraction must be in (0, 1]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> RunConfig:
        obj = dict(obj)
        if isinstance(obj.get("model"), dict):
            obj["model"] = ModelConfig.from_json(obj["model"])
        return cls(**obj)


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


def _batches(lengths: Sequence[int], batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled batches of similar-length examples (less padding per batch)."""
    order = rng.permutation(len(lengths))
    lengths = np.asarray(lengths)
    chunk = batch_size * BUCKET_BATCHES
    batches = []
    for start in range(0, len(order), chunk):
        part = order[start : start + chunk]
        part = part[np.argsort(lengths[part], kind="stable")]
        batches.extend(part[i : i + batch_size] for i in range(0, len(part), batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]


# -- scoring wrapper ------------------------------------------------------------------


@dataclass
class Classifier:
    """Fine-tuned model plus vocabulary; scores code sequences."""

    params: Params
    config: ModelConfig
    vocab: Vocabulary
    drop_codes: frozenset[str] = frozenset()
    batch_size: int = 64

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> Classifier:
        return cls(
            ckpt.params,
            ckpt.config,
            Vocabulary.from_json(ckpt.extra["vocab"]),
            frozenset(ckpt.extra.get("drop_codes", ())),
        )

    def score_sequences(self, seqs: Sequence[CodeSequence]) -> np.ndarray:
        windows = [encode_window(s, self.vocab, self.config.seq_len) for s in seqs]
        out = []
        for i in range(0, len(windows), self.batch_size):
            ids, mask = stack_windows(windows[i : i + self.batch_size])
            out.append(predict_proba(ids, mask, self.params, self.config))
        return np.concatenate(out).astype(np.float64)

    def score_patients(self, patients: Sequence[PatientRecord]) -> np.ndarray:
        return self.score_sequences([identity_sequence(p) for p in patients])


# -- pre-training ---------------------------------------------------------------------


@dataclass
class PretrainPool:
    sequences: list[CodeSequence]
    vocab: Vocabulary
    train_idx: np.ndarray
    val_idx: np.ndarray


def build_pretrain_pool(patients: Sequence[PatientRecord], cfg: RunConfig) -> PretrainPool:
    """Augmented sequences (each an independent example) and an 80/20 sequence split."""
    if not patients:
        raise ValueError("empty pre-training corpus")
    seqs = augment_corpus(patients, AugmentConfig(alpha=cfg.alpha, seed=cfg.seed))
    vocab = build_vocab(seqs)
    order = _rng(cfg.seed, 1).permutation(len(seqs))
    n_val = int(round(cfg.val_fraction * len(seqs)))
    if len(seqs) >= 2:
        n_val = min(max(n_val, 1), len(seqs) - 1)
    else:
        n_val = 0
    return PretrainPool(seqs, vocab, np.sort(order[n_val:]), np.sort(order[:n_val]))


def _mlm_eval(windows: list[TokenSeq], params: Params, mcfg: ModelConfig, seed: int, rate: float,
              batch_size: int) -> float:  # fmt: skip
    rng = _rng(seed, 5)
    masked = [apply_mlm_mask(w, mcfg.vocab_size, rate, rng) for w in windows]
    total, count = 0.0, 0
    for i in range(0, len(masked), batch_size):
        chunk = masked[i : i + batch_size]
        ids, mask = stack_windows([m.inputs for m in chunk])
        targets = np.stack([m.targets for m in chunk])[:, : ids.shape[1]]
        hidden, _ = forward_encoder(ids, mask, params, mcfg)
        n = int((targets != -100).sum())
        total += mlm_loss(hidden, targets, params) * n
        count += n
    return total / count


def pretrain(patients: Sequence[PatientRecord], cfg: RunConfig) -> Checkpoint:
    """MLM pre-training; returns the checkpoint with the best validation loss."""
    if cfg.phase != "pretrain":
        raise ValueError("pretrain needs a RunConfig with phase='pretrain'")
    pool = build_pretrain_pool(patients, cfg)
    mcfg = replace(cfg.model, vocab_size=len(pool.vocab))
    params = init_params(mcfg, seed=cfg.seed)
    windows = [encode_window(s, pool.vocab, mcfg.seq_len) for s in pool.sequences]
    train_w = [windows[i] for i in pool.train_idx]
    val_w = [windows[i] for i in pool.val_idx] or train_w

    state = AdamState.zeros_like(params)
    hyper = AdamHyper(lr=cfg.lr)
    batch_rng, mask_rng, drop_rng = _rng(cfg.seed, 2), _rng(cfg.seed, 3), _rng(cfg.seed, 4)
    best = (math.inf, copy.deepcopy(params), 0)
    history = []
    stale = 0
    for epoch in range(cfg.epochs):
        losses = []
        for idx in _batches([w.real_len for w in train_w], cfg.batch_size, batch_rng):
            masked = [apply_mlm_mask(train_w[i], mcfg.vocab_size, cfg.mlm_rate, mask_rng) for i in idx]
            ids, mask = stack_windows([m.inputs for m in masked])
            targets = np.stack([m.targets for m in masked])[:, : ids.shape[1]]
            loss, grads = loss_and_grads(Batch(ids, mask, targets=targets), params, mcfg, "mlm", drop_rng)
            adam_step(params, grads, state, hyper)
            losses.append(loss)
        val = _mlm_eval(val_w, params, mcfg, cfg.seed, cfg.mlm_rate, 64)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val})
        logger.info("pretrain epoch %d: train %.4f val %.4f", epoch, history[-1]["train_loss"], val)
        if val < best[0]:
            best = (val, copy.deepcopy(params), state.step)
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break

    return Checkpoint(
        mcfg,
        best[1],
        seed=cfg.seed,
        step=best[2],
        extra={
            "phase": "pretrain",
            "vocab": pool.vocab.to_json(),
            "val_loss": best[0],
            "history": history,
            "pool_size": len(pool.sequences),
            "run_config": cfg.to_json(),
        },
    )


# -- fine-tuning ----------------------------------------------------------------------


@dataclass
class FinetunePools:
    train_patients: list[PatientRecord]
    train_sequences: list[CodeSequence]
    test_patients: list[PatientRecord]


def _is_labeled(p: PatientRecord) -> bool:
    return p.label is not None and p.label.kind in (LabelKind.CASE, LabelKind.CONTROL)


def subsample_patients(
    patients: Sequence[PatientRecord], fraction: float, seed: int
) -> list[PatientRecord]:
    """Class-stratified patient subsample of size ``round(fraction * N)``."""
    if fraction >= 1:
        return list(patients)
    cases = [p for p in patients if p.label.kind == LabelKind.CASE]
    controls = [p for p in patients if p.label.kind == LabelKind.CONTROL]
    k = max(1, round(fraction * len(patients)))
    k_case = round(k * len(cases) / len(patients))
    rng = _rng(seed, 6)
    keep = {
        cases[i].patient_id for i in rng.permutation(len(cases))[:k_case]
    } | {controls[i].patient_id for i in rng.permutation(len(controls))[: k - k_case]}
    return [p for p in patients if p.patient_id in keep]


def build_finetune_pools(
    labeled: Sequence[PatientRecord],
    plan: SplitPlan,
    cfg: RunConfig,
    drop_codes: frozenset[str] = frozenset(),
) -> FinetunePools:
    """Task inputs, patient-level split, scarcity subsample and train augmentation.

    Augmentation only ever sees training patients; test patients stay as
    task inputs and are scored separately.
    """
    usable = [build_task_input(p, drop_codes=drop_codes) for p in labeled if _is_labeled(p)]
    missing = {p.patient_id for p in usable} - plan.train_patient_ids - plan.test_patient_ids
    if missing:
        raise ValueError(f"{len(missing)} labeled patient(s) not covered by the split plan")
    train = [p for p in usable if p.patient_id in plan.train_patient_ids]
    test = [p for p in usable if p.patient_id in plan.test_patient_ids]
    train = subsample_patients(train, cfg.label_fraction, cfg.seed)
    kinds = {p.label.kind for p in train}
    if kinds != {LabelKind.CASE, LabelKind.CONTROL}:
        raise TrainingError(
            f"label_fraction {cfg.label_fraction} leaves no "
            f"{'Case' if LabelKind.CASE not in kinds else 'Control'} patients to train on"
        )
    seqs = augment_corpus(train, AugmentConfig(alpha=cfg.alpha, seed=cfg.seed))
    return FinetunePools(train, seqs, test)


@dataclass
class FinetuneResult:
    checkpoint: Checkpoint
    metrics: dict
    pools: FinetunePools


def finetune(
    labeled: Sequence[PatientRecord],
    base: Checkpoint | None,
    plan: SplitPlan,
    cfg: RunConfig,
    drop_codes: frozenset[str] = frozenset(),
) -> FinetuneResult:
    """BCE fine-tuning of all weights; test metrics from the held-out patients."""
    if cfg.phase != "finetune":
        raise ValueError("finetune needs a RunConfig with phase='finetune'")
    pools = build_finetune_pools(labeled, plan, cfg, drop_codes)
    if base is not None:
        vocab = Vocabulary.from_json(base.extra["vocab"])
        mcfg = base.config
        params = copy.deepcopy(base.params)
    else:
        vocab = build_vocab(pools.train_sequences)
        mcfg = replace(cfg.model, vocab_size=len(vocab))
        params = init_params(mcfg, seed=cfg.seed)
    reset_classifier(params)

    windows = [encode_window(s, vocab, mcfg.seq_len) for s in pools.train_sequences]
    labels = np.array([int(s.label.kind == LabelKind.CASE) for s in pools.train_sequences])
    state = AdamState.zeros_like(params)
    hyper = AdamHyper(lr=cfg.lr)
    batch_rng, drop_rng = _rng(cfg.seed, 7), _rng(cfg.seed, 8)
    history = []
    for epoch in range(cfg.epochs):
        losses = []
        for idx in _batches([w.real_len for w in windows], cfg.batch_size, batch_rng):
            ids, mask = stack_windows([windows[i] for i in idx])
            batch = Batch(ids, mask, labels=labels[idx], pos_weight=cfg.pos_weight)
            loss, grads = loss_and_grads(batch, params, mcfg, "bce", drop_rng)
            adam_step(params, grads, state, hyper)
            losses.append(loss)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses))})
        logger.info("finetune epoch %d: train %.4f", epoch, history[-1]["train_loss"])

    ckpt = Checkpoint(
        mcfg,
        params,
        seed=cfg.seed,
        step=state.step,
        extra={
            "phase": "finetune",
            "vocab": vocab.to_json(),
            "drop_codes": sorted(drop_codes),
            "history": history,
            "run_config": cfg.to_json(),
        },
    )
    model = Classifier(params, mcfg, vocab, drop_codes)
    metrics = evaluate_patients(model, pools.test_patients, cfg.tta_alpha, cfg.seed)
    metrics.update(
        n_train_patients=len(pools.train_patients),
        n_train_sequences=len(pools.train_sequences),
        n_test_patients=len(pools.test_patients),
    )
    return FinetuneResult(ckpt, metrics, pools)


def evaluate_patients(
    model: Classifier, patients: Sequence[PatientRecord], tta_alpha: int | None = None, seed: int = 0
) -> dict:
    """Plain and (optionally) test-time-augmented metrics for task-input patients."""
    plain = score_examples(model, patients)
    tta = tta_examples(model, patients, tta_alpha, seed) if tta_alpha else None
    return metrics_report(plain, tta)
