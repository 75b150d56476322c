"""Command-line entry point: ``ehraug <subcommand> ...``.

Heavy modules are imported after argument parsing so ``--threads`` can cap the
BLAS thread pools before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _add_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--run-config", type=Path, help="RunConfig JSON; explicit flags override it")
    p.add_argument("--model-config", type=Path, help="ModelConfig JSON (defaults: desk-scale model)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ehraug", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=0, help="global seed (default 0)")
    parser.add_argument("--threads", type=int, default=1, help="worker processes / BLAS threads")
    parser.add_argument("--strict", action="store_true", help="fail on malformed input lines")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--config", type=Path, help="SynthConfig JSON")
    p.add_argument("--n-patients", type=int)

    p = sub.add_parser("ingest", help="raw records -> grouped (and optionally labeled) patients")
    p.add_argument("--input", type=Path, required=True, help="raw-record JSONL")
    p.add_argument("--labels", type=Path, help="label config JSON (index_codes, event_codes)")
    p.add_argument("--out", type=Path, required=True, help="patient JSONL")

    p = sub.add_parser("augment", help="patients -> augmented code sequences")
    p.add_argument("--input", type=Path, required=True, help="patient JSONL from ingest")
    p.add_argument("--alpha", type=int, default=1)
    p.add_argument("--no-identity", action="store_true", help="do not force the original ordering")
    p.add_argument("--out", type=Path, required=True, help="sequence JSONL")

    p = sub.add_parser("encode", help="sequences -> padded token ids")
    p.add_argument("--input", type=Path, required=True, help="sequence JSONL")
    p.add_argument("--vocab", type=Path, help="existing vocabulary JSON (built from input if absent)")
    p.add_argument("--vocab-out", type=Path)
    p.add_argument("--seq-len", type=int, default=512)
    p.add_argument("--mlm-rate", type=float, default=0.15, help="also store masked inputs/targets; 0 skips")
    p.add_argument("--out", type=Path, required=True, help=".npz with ids, attn_mask (and mlm_* arrays)")

    p = sub.add_parser("pretrain", help="masked-code pre-training")
    p.add_argument("--input", type=Path, required=True, help="raw-record JSONL (pre-training pool)")
    p.add_argument("--alpha", type=int, default=1)
    _add_model_args(p)
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")

    p = sub.add_parser("finetune", help="Case/Control fine-tuning")
    p.add_argument("--labeled", type=Path, required=True, help="raw-record JSONL (labeled pool)")
    p.add_argument("--labels", type=Path, required=True, help="label config JSON")
    p.add_argument("--base", type=Path, help="pre-trained checkpoint (random init if omitted)")
    p.add_argument("--split", type=Path, required=True, help="split JSON; created if missing")
    p.add_argument("--alpha", type=int, default=1)
    p.add_argument("--label-fraction", type=float, default=1.0)
    p.add_argument("--tta-alpha", type=int, default=8)
    p.add_argument("--keep-event-codes", action="store_true", help="leave outcome codes in the input")
    _add_model_args(p)
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.add_argument("--metrics-out", type=Path)

    p = sub.add_parser("evaluate", help="score labeled patients with a fine-tuned model")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--test", type=Path, required=True, help="raw-record JSONL")
    p.add_argument("--labels", type=Path, required=True, help="label config JSON")
    p.add_argument("--split", type=Path, help="restrict to the split's test patients")
    p.add_argument("--tta-alpha", type=int, default=8, help="0 disables test-time augmentation")
    p.add_argument("--out", type=Path, help="metrics JSON (stdout if omitted)")

    p = sub.add_parser("experiment", help="run an alpha x label-fraction x seed grid")
    p.add_argument("--spec", type=Path, help="ExperimentSpec JSON")
    p.add_argument("--preset", choices=("pretrain-trend", "scarcity-trend"), default="pretrain-trend")
    p.add_argument("--n-seeds", type=int)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--cache-dir", type=Path, help="reuse pre-trained checkpoints across runs")
    return parser


def _print_config(command: str, config: dict) -> None:
    print(json.dumps({"command": command, "config": config}, sort_keys=True, default=str), flush=True)


def _run_config(args, phase: str, **fields):
    from dataclasses import replace

    from .experiment import default_finetune_config, default_pretrain_config
    from .tinyformer import ModelConfig
    from .trainer import RunConfig

    if args.run_config:
        cfg = RunConfig.from_json(json.loads(args.run_config.read_text()))
    else:
        cfg = default_pretrain_config() if phase == "pretrain" else default_finetune_config()
    overrides = {k: v for k, v in (("epochs", args.epochs), ("lr", args.lr),
                                   ("batch_size", args.batch_size)) if v is not None}  # fmt: skip
    if args.model_config:
        overrides["model"] = ModelConfig.from_json(json.loads(args.model_config.read_text()))
    return replace(cfg, phase=phase, seed=args.seed, **overrides, **fields)


def cmd_synth(args) -> int:
    from dataclasses import replace

    from .synth import SynthConfig, gen_corpus, write_corpus

    cfg = SynthConfig.from_json(json.loads(args.config.read_text())) if args.config else SynthConfig()
    cfg = replace(cfg, seed=args.seed, **({"n_patients": args.n_patients} if args.n_patients else {}))
    _print_config("synth", cfg.to_json())
    corpus = gen_corpus(cfg)
    paths = write_corpus(corpus, args.out)
    (args.out / "synth_config.json").write_text(json.dumps(cfg.to_json(), indent=1))
    print(json.dumps({"paths": paths, "stats": corpus.stats}, indent=1))
    return 0


def cmd_ingest(args) -> int:
    from .records import LabelConfig, group_visits, label_patients, parse_records

    _print_config("ingest", {"input": args.input, "labels": args.labels, "strict": args.strict})
    with open(args.input, "rb") as fh:
        parsed = parse_records(fh, strict=args.strict)
    patients = group_visits(parsed.records)
    if args.labels:
        patients = label_patients(patients, LabelConfig.load(args.labels))
    with open(args.out, "w", encoding="utf-8") as fh:
        for p in patients:
            fh.write(json.dumps(p.to_json()) + "\n")
    summary = {"records": len(parsed.records), "skipped": parsed.skipped, "patients": len(patients)}
    if args.labels:
        kinds = [p.label.kind.value for p in patients]
        summary["labels"] = {k: kinds.count(k) for k in sorted(set(kinds))}
    print(json.dumps(summary))
    return 0


def cmd_augment(args) -> int:
    from .augment import AugmentConfig, augment_corpus, write_sequences
    from .records import iter_patient_jsonl

    cfg = AugmentConfig(alpha=args.alpha, seed=args.seed, include_identity=not args.no_identity)
    _print_config("augment", {"input": args.input, "alpha": cfg.alpha, "seed": cfg.seed,
                              "include_identity": cfg.include_identity})  # fmt: skip
    seqs = augment_corpus(list(iter_patient_jsonl(args.input)), cfg)
    write_sequences(args.out, seqs)
    print(json.dumps({"sequences": len(seqs)}))
    return 0


def cmd_encode(args) -> int:
    import numpy as np

    from .augment import read_sequences
    from .seqpipe import Vocabulary, apply_mlm_mask, build_vocab, encode_window

    _print_config("encode", {"input": args.input, "vocab": args.vocab, "seq_len": args.seq_len,
                             "mlm_rate": args.mlm_rate, "seed": args.seed})  # fmt: skip
    seqs = read_sequences(args.input)
    vocab = Vocabulary.load(args.vocab) if args.vocab else build_vocab(seqs)
    windows = [encode_window(s, vocab, args.seq_len) for s in seqs]
    arrays = {
        "ids": np.stack([w.ids for w in windows]),
        "attn_mask": np.stack([w.attn_mask for w in windows]),
        "patient_id": np.array([s.patient_id for s in seqs]),
    }
    if args.mlm_rate:
        rng = np.random.default_rng(args.seed)
        masked = [apply_mlm_mask(w, len(vocab), args.mlm_rate, rng) for w in windows]
        arrays["mlm_ids"] = np.stack([m.inputs.ids for m in masked])
        arrays["mlm_targets"] = np.stack([m.targets for m in masked])
    np.savez(args.out, **arrays)
    if args.vocab_out:
        vocab.save(args.vocab_out)
    print(json.dumps({"sequences": len(windows), "vocab_size": len(vocab)}))
    return 0


def cmd_pretrain(args) -> int:
    from .records import load_patients
    from .trainer import pretrain

    cfg = _run_config(args, "pretrain", alpha=args.alpha)
    _print_config("pretrain", {"input": args.input, **cfg.to_json()})
    ckpt = pretrain(load_patients(args.input, strict=args.strict), cfg)
    ckpt.save(args.out)
    print(json.dumps({"val_loss": ckpt.extra["val_loss"], "steps": ckpt.step}))
    return 0


def _load_labeled(path, labels, strict):
    from .records import LabelConfig, label_patients, load_patients

    cfg = LabelConfig.load(labels)
    return label_patients(load_patients(path, strict=strict), cfg), cfg


def cmd_finetune(args) -> int:
    from .records import LabelKind
    from .tinyformer import Checkpoint
    from .trainer import SplitPlan, finetune, split_patients

    cfg = _run_config(args, "finetune", alpha=args.alpha, label_fraction=args.label_fraction,
                      tta_alpha=args.tta_alpha or None)  # fmt: skip
    _print_config("finetune", {"labeled": args.labeled, "base": args.base, "split": args.split, **cfg.to_json()})
    patients, label_cfg = _load_labeled(args.labeled, args.labels, args.strict)
    if args.split.exists():
        plan = SplitPlan.load(args.split)
    else:
        usable = [p.patient_id for p in patients if p.label.kind != LabelKind.EXCLUDED]
        plan = split_patients(usable, 0.8, args.seed)
        plan.save(args.split)
    base = Checkpoint.load(args.base) if args.base else None
    drop = frozenset() if args.keep_event_codes else label_cfg.event_codes
    result = finetune(patients, base, plan, cfg, drop)
    result.checkpoint.save(args.out)
    metrics = {k: v for k, v in result.metrics.items() if k != "roc"}
    if args.metrics_out:
        args.metrics_out.write_text(json.dumps({**result.metrics, "config": cfg.to_json()}, indent=1))
    print(json.dumps(metrics))
    return 0


def cmd_evaluate(args) -> int:
    from .records import LabelKind
    from .tinyformer import Checkpoint
    from .trainer import Classifier, SplitPlan, build_task_input, evaluate_patients

    _print_config("evaluate", {"model": args.model, "test": args.test, "split": args.split,
                               "tta_alpha": args.tta_alpha, "seed": args.seed})  # fmt: skip
    model = Classifier.from_checkpoint(Checkpoint.load(args.model))
    patients, _ = _load_labeled(args.test, args.labels, args.strict)
    patients = [p for p in patients if p.label.kind != LabelKind.EXCLUDED]
    if args.split:
        keep = SplitPlan.load(args.split).test_patient_ids
        patients = [p for p in patients if p.patient_id in keep]
    patients = [build_task_input(p, drop_codes=model.drop_codes) for p in patients]
    metrics = evaluate_patients(model, patients, args.tta_alpha or None, args.seed)
    text = json.dumps(metrics, indent=1)
    if args.out:
        args.out.write_text(text)
        print(json.dumps({k: v for k, v in metrics.items() if k != "roc"}))
    else:
        print(text)
    return 0


def cmd_experiment(args) -> int:
    from dataclasses import replace

    from .experiment import (
        ExperimentError,
        ExperimentSpec,
        pretrain_trend_spec,
        run_experiment,
        scarcity_trend_spec,
    )

    if args.spec:
        spec = ExperimentSpec.load(args.spec)
    else:
        spec = pretrain_trend_spec() if args.preset == "pretrain-trend" else scarcity_trend_spec()
    spec = replace(spec, first_seed=args.seed, **({"n_seeds": args.n_seeds} if args.n_seeds else {}))
    _print_config("experiment", spec.to_json())
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "spec.json").write_text(json.dumps(spec.to_json(), indent=1))
    try:
        result = run_experiment(spec, args.out, args.cache_dir, workers=args.threads)
    except ExperimentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    sys.stdout.write(result.summary_text)
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "augment": cmd_augment,
    "encode": cmd_encode,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "experiment": cmd_experiment,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    for var in THREAD_VARS:
        os.environ.setdefault(var, str(args.threads))
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
