"""Run records and stored predictions.

Layout under the run directory:

    <run_id>/record.json        the RunRecord, written last
    <run_id>/predictions.jsonl  test-split predictions
    <run_id>/model/ or model.json
    features/<task>/<source>/   extracted .pvf files

Run ids are content-addressed so re-running the same configuration maps to
the same directory and reproduces the same files.
"""
from __future__ import annotations

import hashlib
import json
import re
from pathlib import Path
from typing import Any, Optional

from pydantic import BaseModel, ConfigDict, ValidationError

from pharmvig import __version__
from pharmvig.corpus import Task, TrainsetVariant
from pharmvig.errors import RunRecordError
from pharmvig.evaluation import EvalReport
from pharmvig.finetune import EpochMetric
from pharmvig.persistence import atomic_write_bytes, read_json, write_json

RECORD_FILE = "record.json"
PREDICTIONS_FILE = "predictions.jsonl"


class RunRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    run_id: str
    task: Task
    model: str
    trainset: TrainsetVariant
    epochs: int
    seed: int
    # everything needed to re-run: hyperparameters, bundle location, feature source
    config: dict[str, Any]
    epoch_metrics: tuple[EpochMetric, ...] = ()
    test_report: EvalReport
    # paths relative to the run directory
    artifacts: dict[str, str] = {}
    toolkit_version: str = __version__


def _slug(text: str) -> str:
    return re.sub(r"[^a-z0-9.]+", "-", text.lower()).strip("-")


def make_run_id(task: Task, model: str, trainset: TrainsetVariant, epochs: int, seed: int, snapshot: dict) -> str:
    digest = hashlib.sha1(json.dumps(snapshot, sort_keys=True, default=str).encode("utf-8")).hexdigest()[:8]
    return f"{task.value}-{_slug(model)}-{trainset.value}-e{epochs}-s{seed}-{digest}"


def run_path(run_dir: Path, run_id: str) -> Path:
    return Path(run_dir) / run_id


def write_run_record(run_dir: Path, record: RunRecord) -> Path:
    path = run_path(run_dir, record.run_id) / RECORD_FILE
    write_json(path, record.model_dump(mode="json"))
    return path


def load_run_record(run_dir: Path, run_id: str) -> RunRecord:
    path = run_path(run_dir, run_id) / RECORD_FILE
    if not path.exists():
        raise RunRecordError(f"no run {run_id!r} in {run_dir}")
    try:
        return RunRecord.model_validate(read_json(path))
    except (ValidationError, json.JSONDecodeError) as e:
        raise RunRecordError(f"run record {path} is corrupt: {e}")


def write_predictions(path: Path, rows: list[dict]) -> None:
    lines = "".join(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n" for row in rows)
    atomic_write_bytes(path, lines.encode("utf-8"))


def read_predictions(path: Path) -> list[dict]:
    if not path.exists():
        raise RunRecordError(f"predictions file {path} is missing")
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def feature_dir(run_dir: Path, task: Task, source: str) -> Path:
    """Where extracted features for `source` (a variant key or run id) live."""
    return Path(run_dir) / "features" / task.value / _slug(source)


def relative_to_run_dir(run_dir: Path, path: Path) -> str:
    return Path(path).resolve().relative_to(Path(run_dir).resolve()).as_posix()


def list_run_ids(run_dir: Path, task: Optional[Task] = None) -> list[str]:
    run_dir = Path(run_dir)
    if not run_dir.exists():
        return []
    prefix = f"{task.value}-" if task else ""
    return sorted(p.name for p in run_dir.iterdir() if (p / RECORD_FILE).exists() and p.name.startswith(prefix))
