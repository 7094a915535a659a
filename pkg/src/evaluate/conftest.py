from __future__ import annotations

import json
import os
import sys
from pathlib import Path
from typing import Optional

import pytest

sys.path.append(str(Path(__file__).resolve().parents[1]))
from pharmvig.encoder_client import reset_shared_encoders
from pharmvig.finetune import VARIANT_KEYS, ModelVariant, build_tiny_checkpoint

# whole-word pieces in the miniature vocab; anything else splits into characters
FIXTURE_WORDS = (
    "i", "took", "the", "pill", "today", "and", "felt", "it", "was", "my", "drug", "this",
    "great", "okay", "awful", "rash", "headache", "severe", "nausea", "fine", "no", "side", "effects",
)

requires_public_data = pytest.mark.skipif(
    not os.getenv("PHARMVIG_DATA_DIR"),
    reason="set PHARMVIG_DATA_DIR to the directory holding drugsComTrain_raw.tsv / drugsComTest_raw.tsv",
)


def write_registry(path: Path, checkpoint: Path, overrides: Optional[dict] = None) -> Path:
    """Registry pointing every variant key at one checkpoint; B-U is the uncased one."""
    variants = []
    for key in VARIANT_KEYS:
        entry = {"key": key, "checkpoint": str(checkpoint), "cased": key != "B-U"}
        entry.update((overrides or {}).get(key, {}))
        variants.append(entry)
    path.write_text(json.dumps({"variants": variants}), encoding="utf-8")
    return path


@pytest.fixture(scope="session")
def tiny_checkpoint(tmp_path_factory) -> Path:
    path = build_tiny_checkpoint(tmp_path_factory.mktemp("tiny-bert"), words=FIXTURE_WORDS)
    yield path
    reset_shared_encoders()


@pytest.fixture(scope="session")
def tiny_variant(tiny_checkpoint) -> ModelVariant:
    return ModelVariant(key="B-C", checkpoint_ref=str(tiny_checkpoint), cased=True, hidden_dim=32)


@pytest.fixture(scope="session")
def tiny_uncased_variant(tiny_checkpoint) -> ModelVariant:
    return ModelVariant(key="B-U", checkpoint_ref=str(tiny_checkpoint), cased=False, hidden_dim=32)
