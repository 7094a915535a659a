"""pharmvig command line: prepare, train, extract, evaluate, report.

Usage (from src/):
    python run_pharmvig.py --config ../config/toolkit.json prepare --task presence
    python run_pharmvig.py train --task presence --model b-u --trainset undersampled --epochs 3
    python run_pharmvig.py train --task ner --model crf
    python run_pharmvig.py extract --task presence --model b-c
    python run_pharmvig.py train --task presence --model b-c+lstm
    python run_pharmvig.py evaluate <run_id>
    python run_pharmvig.py report <run_id> <run_id> ...
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from pharmvig.corpus import (
    DatasetBundle,
    HttpTweetResolver,
    JsonlTweetResolver,
    Task,
    TrainsetVariant,
    load_drug_reviews,
    load_ner_corpus,
    load_tweet_corpus,
    make_ner_bundle,
    make_presence_bundles,
    make_sentiment_bundle,
    read_bundle,
    task_labels,
    write_bundle,
)
from pharmvig.errors import ModelKeyError, PharmvigError
from pharmvig.evaluation import evaluate, sentiment_error_breakdown, token_confusion_report
from pharmvig.finetune import EPOCH_SWEEP, TrainedModel, canonical_key, registry_load
from pharmvig.persistence import atomic_write_bytes, write_json
from pharmvig.reports import (
    HEADLINE_METRIC,
    bundle_summary,
    format_run_grids,
    rounded,
    run_grid,
    write_bundle_summary,
    write_eval_outputs,
)
from pharmvig.runs import (
    PREDICTIONS_FILE,
    RunRecord,
    feature_dir,
    list_run_ids,
    load_run_record,
    make_run_id,
    read_predictions,
    relative_to_run_dir,
    run_path,
    write_predictions,
    write_run_record,
)
from pharmvig.settings import ConfigError, ToolkitConfig, load_config, tweet_api_token
from pharmvig.trainers import (
    ModelFamily,
    check_task_support,
    parse_model_key,
    positive_label,
    split_features,
    train_and_predict,
)

logger = logging.getLogger(__name__)


def _bundle_dir(config: ToolkitConfig, task: Task) -> Path:
    return config.bundle_dir / task.value


def _require_inputs(config: ToolkitConfig, task: Task) -> None:
    missing = config.missing_inputs(task)
    if missing:
        raise ConfigError(f"missing raw inputs for {task.value}: {', '.join(missing)}")


def cmd_prepare(config: ToolkitConfig, task: Task, seed: Optional[int] = None) -> list[Path]:
    """Build the task's bundles from raw data and write them with a label summary."""
    seed = config.seed if seed is None else seed
    _require_inputs(config, task)
    out_dir = _bundle_dir(config, task)
    written: list[Path] = []

    if task is Task.SENTIMENT:
        train = load_drug_reviews(config.data.reviews_train)
        test = load_drug_reviews(config.data.reviews_test)
        bundles = {TrainsetVariant.NATURAL: make_sentiment_bundle(train, test, config.sentiment_dev_fraction, seed)}
    elif task is Task.PRESENCE:
        if config.data.tweet_texts is not None:
            resolver = JsonlTweetResolver(config.data.tweet_texts)
        else:
            resolver = HttpTweetResolver(config.data.tweet_api_url, tweet_api_token())
        records, skips = load_tweet_corpus(config.data.tweet_annotations, resolver)
        bundles = make_presence_bundles(
            records,
            dev_fraction=config.presence_dev_fraction,
            test_fraction=config.presence_test_fraction,
            seed=seed,
            oversample=config.oversample.model_copy(update={"seed": seed}),
            undersample=config.undersample.model_copy(update={"seed": seed}),
        )
        skipped = out_dir / "skipped.json"
        write_json(skipped, {"total": skips.total, "usable": skips.usable, "skipped_ids": list(skips.skipped_ids)})
        written.append(skipped)
    else:
        records = load_ner_corpus(config.data.ner)
        bundles = {TrainsetVariant.NATURAL: make_ner_bundle(records, config.ner_dev_fraction, config.ner_test_fraction, seed)}

    for bundle in bundles.values():
        written.extend(write_bundle(bundle, out_dir))
    written.extend(write_bundle_summary(out_dir, task, bundle_summary(bundles)))
    print(f"✓ Prepared {task.value} bundles in {out_dir}")
    return written


def _load_bundle(config: ToolkitConfig, task: Task, trainset: TrainsetVariant) -> DatasetBundle:
    if trainset is not TrainsetVariant.NATURAL and task is not Task.PRESENCE:
        raise ValueError(f"only the presence task has rebalanced train sets, not {task.value}")
    return read_bundle(_bundle_dir(config, task), task, trainset)


def _registry(config: ToolkitConfig):
    if config.registry is None:
        raise ConfigError("no model registry configured (registry in the toolkit config)")
    return registry_load(config.registry)


def _load_finetuned(config: ToolkitConfig, run_id: str, device: Optional[str]) -> TrainedModel:
    record = load_run_record(config.run_dir, run_id)
    model_dir = run_path(config.run_dir, run_id) / "model"
    if not model_dir.exists():
        raise ModelKeyError(f"run {run_id} ({record.model}) has no fine-tuned model to extract from")
    return TrainedModel.load(model_dir, device=device)


def cmd_extract(
    config: ToolkitConfig,
    task: Task,
    model_key: str,
    trainset: TrainsetVariant = TrainsetVariant.NATURAL,
    from_run: Optional[str] = None,
    device: Optional[str] = None,
) -> list[Path]:
    """Write .pvf feature files for the train, dev and test splits."""
    variant_key = canonical_key(model_key.split("+")[0])
    bundle = _load_bundle(config, task, trainset)
    if from_run:
        source = _load_finetuned(config, from_run, device)
        if source.variant.key != variant_key:
            raise ModelKeyError(f"run {from_run} fine-tuned {source.variant.key}, not {variant_key}")
        directory = feature_dir(config.run_dir, task, from_run)
    else:
        source = _registry(config)[variant_key]
        directory = feature_dir(config.run_dir, task, variant_key)
    split_features(source, bundle, directory)
    print(f"✓ Extracted {variant_key} features to {directory}")
    return sorted(directory.glob("*.pvf"))


def cmd_train(
    config: ToolkitConfig,
    task: Task,
    model_key: str,
    epochs: Optional[int] = None,
    trainset: TrainsetVariant = TrainsetVariant.NATURAL,
    seed: Optional[int] = None,
    from_run: Optional[str] = None,
    device: Optional[str] = None,
) -> RunRecord:
    key = parse_model_key(model_key)
    check_task_support(key, task)
    seed = config.seed if seed is None else seed
    if key.default_epochs() == 0:
        epochs = 0
    elif epochs is None:
        epochs = key.default_epochs()
    elif epochs < 1:
        raise ValueError(f"--epochs must be >= 1 for {key.name}")
    if from_run and key.family is not ModelFamily.DOWNSTREAM:
        raise ValueError("--from-run only applies to downstream (<variant>+lr|cnn|lstm) models")

    bundle = _load_bundle(config, task, trainset)
    variants = features = None
    feature_source = None
    if key.family is ModelFamily.TRANSFORMER:
        variants = _registry(config)
    elif key.family is ModelFamily.DOWNSTREAM:
        if from_run:
            source = _load_finetuned(config, from_run, device)
            if source.variant.key != key.variant:
                raise ModelKeyError(f"run {from_run} fine-tuned {source.variant.key}, not {key.variant}")
            feature_source = from_run
        else:
            source = _registry(config)[key.variant]
            feature_source = key.variant
        features = split_features(source, bundle, feature_dir(config.run_dir, task, feature_source))

    outcome = train_and_predict(key, bundle, epochs, seed, variants=variants, features=features, device=device)
    labels = task_labels(task)
    report = evaluate(outcome.golds, outcome.preds, labels, positive_label(task), outcome.probabilities)

    snapshot = {
        "task": task.value,
        "model": key.name,
        "trainset": trainset.value,
        "epochs": epochs,
        "seed": seed,
        "bundle": {"seed": bundle.seed, "train": len(bundle.train), "dev": len(bundle.dev), "test": len(bundle.test)},
        "features": feature_source,
        "hyperparameters": outcome.hyperparameters,
    }
    run_id = make_run_id(task, key.name, trainset, epochs, seed, snapshot)
    run_dir = run_path(config.run_dir, run_id)
    if isinstance(outcome.model, TrainedModel):
        model_path = outcome.model.save(run_dir / "model")
    else:
        model_path = run_dir / "model.json"
        write_json(model_path, outcome.model.to_dict())
    write_predictions(run_dir / PREDICTIONS_FILE, outcome.predictions)

    record = RunRecord(
        run_id=run_id,
        task=task,
        model=key.name,
        trainset=trainset,
        epochs=epochs,
        seed=seed,
        config=snapshot,
        epoch_metrics=outcome.epoch_metrics,
        test_report=report,
        artifacts={
            "model": relative_to_run_dir(config.run_dir, model_path),
            "predictions": relative_to_run_dir(config.run_dir, run_dir / PREDICTIONS_FILE),
        },
    )
    write_run_record(config.run_dir, record)
    headline = HEADLINE_METRIC[task]
    print(f"✓ Saved run {run_id}: test {headline} {rounded(getattr(report, headline)):.3f}")
    return record


def cmd_evaluate(config: ToolkitConfig, run_id: str, sample_k: int = 50) -> list[Path]:
    """Recompute the test report from stored predictions and write report files."""
    record = load_run_record(config.run_dir, run_id)
    rows = read_predictions(run_path(config.run_dir, run_id) / PREDICTIONS_FILE)
    labels = task_labels(record.task)

    if record.task is Task.NER:
        gold_seqs = [r["gold"] for r in rows]
        pred_seqs = [r["pred"] for r in rows]
        report = evaluate([t for s in gold_seqs for t in s], [t for s in pred_seqs for t in s], labels)
        analysis = token_confusion_report(gold_seqs, pred_seqs, [r["words"] for r in rows])
    else:
        golds, preds = [r["gold"] for r in rows], [r["pred"] for r in rows]
        probs = None
        if rows and "probs" in rows[0]:
            probs = np.asarray([[r["probs"][label] for label in labels] for r in rows])
        report = evaluate(golds, preds, labels, positive_label(record.task), probs)
        analysis = None
        if record.task is Task.SENTIMENT:
            analysis = sentiment_error_breakdown(golds, preds, [r["id"] for r in rows], sample_k, record.seed)

    title = f"{run_id}: {record.model} on {record.task.value} ({record.trainset.value} train set, {record.epochs} epochs)"
    written = write_eval_outputs(run_path(config.run_dir, run_id), title, report, record.epoch_metrics, analysis)
    print(f"✓ Wrote {len(written)} report files for {run_id}")
    return written


def cmd_report(
    config: ToolkitConfig,
    run_ids: Sequence[str],
    task: Optional[Task] = None,
    out_dir: Optional[Path] = None,
) -> str:
    """Merge run records into (model x epochs) grids per task and train set."""
    run_ids = list(run_ids) or list_run_ids(config.run_dir, task)
    grids = run_grid([load_run_record(config.run_dir, rid) for rid in run_ids])
    text = format_run_grids(grids)
    out_dir = Path(out_dir) if out_dir else config.run_dir / "reports"
    atomic_write_bytes(out_dir / "report.txt", text.encode("utf-8"))
    write_json(out_dir / "report.json", {"runs": sorted(run_ids), "grids": grids})
    print(text, end="")
    return text


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pharmvig", description="Pharmacovigilance text-mining experiments.")
    p.add_argument("--config", help="toolkit config JSON (default: $PHARMVIG_CONFIG)")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    tasks = [t.value for t in Task]
    trainsets = [v.value for v in TrainsetVariant]

    prepare = sub.add_parser("prepare", help="build dataset bundles from raw data")
    prepare.add_argument("--task", choices=tasks, required=True)
    prepare.add_argument("--seed", type=int)

    train = sub.add_parser("train", help="train a model and score it on the test split")
    train.add_argument("--task", choices=tasks, required=True)
    train.add_argument("--model", required=True, help="variant key, majority|nb|crf, or <variant>+lr|cnn|lstm")
    train.add_argument("--epochs", type=int,
                       help=f"training epochs; transformers were compared at {', '.join(map(str, EPOCH_SWEEP))}")
    train.add_argument("--trainset", choices=trainsets, default=TrainsetVariant.NATURAL.value)
    train.add_argument("--seed", type=int)
    train.add_argument("--from-run", help="use features of this fine-tuning run (downstream models)")
    train.add_argument("--device")

    extract = sub.add_parser("extract", help="extract embedding features for downstream models")
    extract.add_argument("--task", choices=tasks, required=True)
    extract.add_argument("--model", required=True, help="variant key")
    extract.add_argument("--trainset", choices=trainsets, default=TrainsetVariant.NATURAL.value)
    extract.add_argument("--from-run", help="extract from this fine-tuning run instead of the pretrained encoder")
    extract.add_argument("--device")

    ev = sub.add_parser("evaluate", help="write report files for a run")
    ev.add_argument("run_id")
    ev.add_argument("--sample-k", type=int, default=50, help="misclassified reviews sampled per error type")

    report = sub.add_parser("report", help="compare runs in (model x epochs) tables")
    report.add_argument("run_ids", nargs="*", help="run ids (default: every run in the run directory)")
    report.add_argument("--task", choices=tasks)
    report.add_argument("--out", help="output directory (default: <run_dir>/reports)")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        config = load_config(args.config)
        if args.command == "prepare":
            cmd_prepare(config, Task(args.task), args.seed)
        elif args.command == "train":
            cmd_train(config, Task(args.task), args.model, args.epochs, TrainsetVariant(args.trainset),
                      args.seed, args.from_run, args.device)
        elif args.command == "extract":
            cmd_extract(config, Task(args.task), args.model, TrainsetVariant(args.trainset), args.from_run, args.device)
        elif args.command == "evaluate":
            cmd_evaluate(config, args.run_id, args.sample_k)
        else:
            cmd_report(config, args.run_ids, Task(args.task) if args.task else None, args.out)
    except (PharmvigError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0
