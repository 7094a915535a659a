"""Text, JSON and CSV emitters for evaluation reports, bundle summaries and run grids.

Every number is rounded once to DECIMALS places and the same rounded value
feeds both the text table and the JSON document.
"""
from __future__ import annotations

from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import pandas as pd

from pharmvig.corpus import DatasetBundle, Task, TrainsetVariant, label_distribution, task_labels
from pharmvig.errors import ReportError
from pharmvig.evaluation import ConfusionMatrix, EvalReport, SentimentErrorBreakdown, TokenConfusionReport, epoch_curve
from pharmvig.persistence import atomic_write_bytes, write_json

DECIMALS = 3
HEADLINE_METRIC = {Task.SENTIMENT: "accuracy", Task.PRESENCE: "positive_f", Task.NER: "macro_f"}
SECONDARY_METRIC = {Task.SENTIMENT: "mean_loss", Task.PRESENCE: "accuracy", Task.NER: "accuracy"}


def rounded(x: Optional[float]) -> Optional[float]:
    return None if x is None else round(float(x), DECIMALS)


def _cell(x: Any) -> str:
    if x is None:
        return "-"
    if isinstance(x, float):
        return f"{x:.{DECIMALS}f}"
    return str(x)


def format_table(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    cells = [[_cell(c) for c in row] for row in rows]
    widths = [max([len(h)] + [len(r[i]) for r in cells]) for i, h in enumerate(header)]
    row_format = " ".join(f"{{:<{w + 1}}}" for w in widths)
    lines = [row_format.format(*header).rstrip(), "-" * (sum(widths) + 2 * len(widths) - 1)]
    lines += [row_format.format(*r).rstrip() for r in cells]
    return "\n".join(lines) + "\n"


def confusion_frame(cm: ConfusionMatrix) -> pd.DataFrame:
    return pd.DataFrame(
        cm.as_array(),
        index=pd.Index(cm.labels, name="gold"),
        columns=pd.Index(cm.labels, name="predicted"),
    )


def eval_summary(report: EvalReport) -> dict:
    return {
        "accuracy": rounded(report.accuracy),
        "macro_f": rounded(report.macro_f),
        "positive_label": report.positive_label,
        "positive_f": rounded(report.positive_f),
        "mean_loss": rounded(report.mean_loss),
        "per_class": {
            label: {"precision": rounded(s.precision), "recall": rounded(s.recall), "f1": rounded(s.f1)}
            for label, s in report.per_class.items()
        },
        "confusion": {"labels": list(report.confusion.labels), "counts": [list(r) for r in report.confusion.counts]},
    }


def format_eval_report(title: str, summary: dict) -> str:
    out = [f"{title}\n"]
    headline = [["accuracy", summary["accuracy"]], ["macro F", summary["macro_f"]]]
    if summary["positive_f"] is not None:
        headline.append([f"F ({summary['positive_label']})", summary["positive_f"]])
    if summary["mean_loss"] is not None:
        headline.append(["mean loss", summary["mean_loss"]])
    out.append(format_table(["Metric", "Value"], headline))
    out.append("\n")
    out.append(format_table(
        ["Label", "Precision", "Recall", "F1"],
        [[label, s["precision"], s["recall"], s["f1"]] for label, s in summary["per_class"].items()],
    ))
    out.append("\nConfusion (rows gold, columns predicted)\n")
    labels = summary["confusion"]["labels"]
    out.append(format_table(["gold"] + labels, [[g] + row for g, row in zip(labels, summary["confusion"]["counts"])]))
    return "".join(out)


def format_epoch_table(record_epoch_metrics) -> str:
    rows = [[r.epoch, rounded(r.accuracy), rounded(r.loss)] for r in epoch_curve(record_epoch_metrics)]
    return format_table(["Epoch", "Dev accuracy", "Dev loss"], rows)


def write_eval_outputs(
    directory: Path,
    title: str,
    report: EvalReport,
    epoch_metrics=(),
    analysis: Optional[SentimentErrorBreakdown | TokenConfusionReport] = None,
) -> list[Path]:
    """report.txt, report.json, confusion.csv and, when given, the error analysis."""
    directory = Path(directory)
    summary = eval_summary(report)
    text = format_eval_report(title, summary)
    document: dict[str, Any] = {"title": title, **summary}
    if epoch_metrics:
        text += "\nDev metrics per epoch\n" + format_epoch_table(epoch_metrics)
        document["epochs"] = [
            {"epoch": r.epoch, "accuracy": rounded(r.accuracy), "loss": rounded(r.loss)} for r in epoch_curve(epoch_metrics)
        ]
    written = [directory / "report.txt", directory / "report.json", directory / "confusion.csv"]
    atomic_write_bytes(written[0], text.encode("utf-8"))
    write_json(written[1], document)
    atomic_write_bytes(written[2], confusion_frame(report.confusion).to_csv().encode("utf-8"))

    if isinstance(analysis, SentimentErrorBreakdown):
        path = directory / "error_breakdown.json"
        write_json(path, {**analysis.model_dump(mode="json"), "neutral_share": rounded(analysis.neutral_share)})
        written.append(path)
    elif isinstance(analysis, TokenConfusionReport):
        path = directory / "token_confusion.json"
        write_json(path, {
            "false_negative_words": [{"word": w, "count": c} for w, c in analysis.fn_word_counts],
            "false_positive_words": [{"word": w, "count": c} for w, c in analysis.fp_word_counts],
        })
        written.append(path)
    return written


def bundle_summary(bundles: Mapping[TrainsetVariant, DatasetBundle]) -> pd.DataFrame:
    """Label counts per split; one train column per train variant."""
    first = next(iter(bundles.values()))
    columns: dict[str, dict[str, int]] = {}
    for variant, bundle in bundles.items():
        name = "train" if len(bundles) == 1 else f"train ({variant.value})"
        columns[name] = dict(label_distribution(bundle.train, bundle.task))
    columns["dev"] = dict(label_distribution(first.dev, first.task))
    columns["test"] = dict(label_distribution(first.test, first.task))
    frame = pd.DataFrame(columns, index=pd.Index(task_labels(first.task), name="label")).fillna(0).astype(int)
    frame.loc["total"] = frame.sum()
    return frame


def write_bundle_summary(directory: Path, task: Task, frame: pd.DataFrame) -> list[Path]:
    header = ["label"] + [str(c) for c in frame.columns]
    rows = [[label] + [int(v) for v in frame.loc[label]] for label in frame.index]
    text = f"{task.value} dataset\n" + format_table(header, rows)
    txt, js = Path(directory) / "summary.txt", Path(directory) / "summary.json"
    atomic_write_bytes(txt, text.encode("utf-8"))
    write_json(js, {"task": task.value, "counts": {str(c): {str(k): int(v) for k, v in frame[c].items()} for c in frame.columns}})
    return [txt, js]


def run_grid(records: Sequence) -> dict[str, dict]:
    """Pivot run records into (model x epochs) grids, one per task and train set.

    Each cell holds the task's headline metric plus its secondary number: mean
    loss for sentiment, accuracy for presence and NER.
    """
    if not records:
        raise ReportError("no runs to report")
    frame = pd.DataFrame([
        {
            "task": r.task.value,
            "trainset": r.trainset.value,
            "model": r.model,
            "epochs": r.epochs,
            "metric": rounded(getattr(r.test_report, HEADLINE_METRIC[r.task])),
            "secondary": rounded(getattr(r.test_report, SECONDARY_METRIC[r.task])),
        }
        for r in records
    ])
    grids = {}
    for (task, trainset), group in frame.groupby(["task", "trainset"], sort=True):
        try:
            metric = group.pivot(index="model", columns="epochs", values="metric")
            secondary = group.pivot(index="model", columns="epochs", values="secondary")
        except ValueError:
            raise ReportError(f"{task}/{trainset}: several runs share a model and epoch count")
        grids[f"{task}/{trainset}"] = {
            "task": task,
            "trainset": trainset,
            "metric": HEADLINE_METRIC[Task(task)],
            "secondary": SECONDARY_METRIC[Task(task)],
            "epochs": [int(e) for e in metric.columns],
            "rows": [
                {
                    "model": model,
                    "cells": {
                        str(int(e)): None if pd.isna(metric.at[model, e]) else {
                            "metric": float(metric.at[model, e]),
                            "secondary": None if pd.isna(secondary.at[model, e]) else float(secondary.at[model, e]),
                        }
                        for e in metric.columns
                    },
                }
                for model in metric.index
            ],
        }
    return grids


def format_run_grids(grids: dict[str, dict]) -> str:
    out = []
    for name, grid in grids.items():
        out.append(f"{name}: {grid['metric']} ({grid['secondary']})\n")
        header = ["Model"] + [f"{e} epochs" for e in grid["epochs"]]
        rows = []
        for row in grid["rows"]:
            cells = []
            for e in grid["epochs"]:
                cell = row["cells"][str(e)]
                if cell is None:
                    cells.append("-")
                else:
                    cells.append(f"{_cell(cell['metric'])} ({_cell(cell['secondary'])})")
            rows.append([row["model"]] + cells)
        out.append(format_table(header, rows))
        out.append("\n")
    return "".join(out)
