"""Toolkit configuration.

A JSON config file describes where the raw data, the model registry and the
run directory live. Values can be overridden from the environment (a `.env`
file in the working directory is honoured):

    PHARMVIG_CONFIG           default config path when --config is absent
    PHARMVIG_RUN_DIR          overrides run_dir
    PHARMVIG_TWEET_API_TOKEN  bearer token for the HTTP tweet resolver
"""
from __future__ import annotations

import json
import logging
import os
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv
from pydantic import BaseModel, Field, field_validator, model_validator

from pharmvig.corpus import RebalanceMode, RebalanceSpec, Task
from pharmvig.errors import PharmvigError

logger = logging.getLogger(__name__)

load_dotenv(Path.cwd() / ".env")

DEFAULT_SEED = 13


class ConfigError(PharmvigError, ValueError):
    pass


class DataPaths(BaseModel):
    reviews_train: Optional[Path] = None
    reviews_test: Optional[Path] = None
    tweet_annotations: Optional[Path] = None
    tweet_texts: Optional[Path] = None
    tweet_api_url: Optional[str] = None
    ner: Optional[Path] = None


class ToolkitConfig(BaseModel):
    data: DataPaths = Field(default_factory=DataPaths)
    registry: Optional[Path] = None
    run_dir: Path = Path("runs")
    bundle_dir: Path = Path("bundles")
    seed: int = DEFAULT_SEED
    sentiment_dev_fraction: float = Field(0.2, ge=0.0, lt=1.0)
    presence_dev_fraction: float = Field(0.2, ge=0.0, lt=1.0)
    presence_test_fraction: float = Field(0.2, gt=0.0, lt=1.0)
    ner_dev_fraction: float = Field(0.15, ge=0.0, lt=1.0)
    ner_test_fraction: float = Field(0.25, gt=0.0, lt=1.0)
    oversample: RebalanceSpec = Field(
        default_factory=lambda: RebalanceSpec(mode=RebalanceMode.OVERSAMPLE, target_minority_fraction=0.5, seed=DEFAULT_SEED)
    )
    undersample: RebalanceSpec = Field(
        default_factory=lambda: RebalanceSpec(mode=RebalanceMode.UNDERSAMPLE, target_minority_fraction=1 / 3, seed=DEFAULT_SEED)
    )

    @field_validator("run_dir", "bundle_dir")
    @classmethod
    def _not_a_file(cls, value: Path) -> Path:
        if value.exists() and not value.is_dir():
            raise ValueError(f"{value} exists and is not a directory")
        return value

    @model_validator(mode="after")
    def _split_fits(self) -> "ToolkitConfig":
        if self.presence_dev_fraction + self.presence_test_fraction >= 1.0:
            raise ValueError("presence dev + test fractions must leave a training split")
        if self.ner_dev_fraction + self.ner_test_fraction >= 1.0:
            raise ValueError("ner dev + test fractions must leave a training split")
        return self

    def resolved(self, base: Path) -> "ToolkitConfig":
        """Return a copy with every relative path anchored at `base`."""
        def anchor(p: Optional[Path]) -> Optional[Path]:
            if p is None:
                return None
            p = p.expanduser()
            return p if p.is_absolute() else (base / p).resolve()

        data = self.data.model_copy(update={
            name: anchor(getattr(self.data, name))
            for name in ("reviews_train", "reviews_test", "tweet_annotations", "tweet_texts", "ner")
        })
        return self.model_copy(update={
            "data": data,
            "registry": anchor(self.registry),
            "run_dir": anchor(self.run_dir),
            "bundle_dir": anchor(self.bundle_dir),
        })

    def required_inputs(self, task: Task) -> dict[str, Optional[Path]]:
        if task is Task.SENTIMENT:
            return {"data.reviews_train": self.data.reviews_train, "data.reviews_test": self.data.reviews_test}
        if task is Task.PRESENCE:
            inputs = {"data.tweet_annotations": self.data.tweet_annotations}
            if self.data.tweet_api_url is None:
                inputs["data.tweet_texts"] = self.data.tweet_texts
            return inputs
        return {"data.ner": self.data.ner}

    def missing_inputs(self, task: Task) -> list[str]:
        """Names (and paths) of the raw inputs `task` needs that are absent."""
        missing = []
        for name, path in self.required_inputs(task).items():
            if path is None:
                missing.append(f"{name} (not configured)")
            elif not path.exists():
                missing.append(f"{name} ({path})")
        return missing


def load_config(path: Optional[str | Path] = None) -> ToolkitConfig:
    """Read and validate the toolkit config, then apply env overrides."""
    path = path or os.getenv("PHARMVIG_CONFIG")
    if path is None:
        config = ToolkitConfig().resolved(Path.cwd())
    else:
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}")
        config = ToolkitConfig.model_validate(raw).resolved(path.resolve().parent)

    run_dir = os.getenv("PHARMVIG_RUN_DIR")
    if run_dir:
        config = config.model_copy(update={"run_dir": Path(run_dir).expanduser().resolve()})
    logger.debug("run directory: %s", config.run_dir)
    return config


def tweet_api_token() -> Optional[str]:
    return os.getenv("PHARMVIG_TWEET_API_TOKEN")
