"""lazy encoder client for the toolkit

small EncoderClient wrapper around a pretrained HF encoder + tokenizer with
lazy init, a close() method, and a module-level shared factory keyed by
checkpoint
"""
from __future__ import annotations

import logging
from threading import Lock
from typing import Optional

import torch

logger = logging.getLogger(__name__)


def select_device(prefer: Optional[str] = None) -> torch.device:
    if prefer:
        return torch.device(prefer)
    return torch.device("cuda" if torch.cuda.is_available() else "cpu")


def load_tokenizer(checkpoint: str, cased: bool = True):
    """Tokenizer only, with lowercasing forced to match `cased`.

    Converted checkpoints often ship without a tokenizer config, in which case
    the BERT default would lowercase a cased vocab.
    """
    from transformers import AutoTokenizer

    try:
        tokenizer = AutoTokenizer.from_pretrained(checkpoint, use_fast=True, do_lower_case=not cased)
    except OSError as e:
        raise RuntimeError(f"failed to load tokenizer {checkpoint}: {e}") from e
    lowercases = getattr(tokenizer, "do_lower_case", not cased)
    if lowercases == cased:
        raise ValueError(f"{checkpoint}: tokenizer do_lower_case={lowercases} for a {'cased' if cased else 'uncased'} variant")
    return tokenizer


class EncoderClient:
    """Lazy pretrained encoder.
    - Loads tokenizer and encoder on first use, in eval mode.
    - Keeps transformers imports local so importing the toolkit stays cheap.
    """

    def __init__(self, checkpoint: str, cased: bool = True, device: Optional[str] = None) -> None:
        self.checkpoint = checkpoint
        self.cased = cased
        self.device = select_device(device)
        self._tokenizer = None
        self._encoder = None
        # protect init/close so concurrent callers don't race
        self._init_lock = Lock()

    def _init_models(self) -> None:
        # double-checked locking: fast path once loaded
        if self._encoder is not None:
            return
        with self._init_lock:
            if self._encoder is not None:
                return
            from transformers import AutoModel

            logger.info("loading encoder %s on %s", self.checkpoint, self.device)
            tokenizer = load_tokenizer(self.checkpoint, self.cased)
            try:
                encoder = AutoModel.from_pretrained(self.checkpoint).to(self.device)
            except OSError as e:
                raise RuntimeError(f"failed to load checkpoint {self.checkpoint}: {e}") from e
            encoder.eval()
            self._tokenizer = tokenizer
            self._encoder = encoder

    @property
    def tokenizer(self):
        self._init_models()
        return self._tokenizer

    @property
    def encoder(self):
        self._init_models()
        return self._encoder

    @property
    def loaded(self) -> bool:
        return self._encoder is not None

    def close(self) -> None:
        with self._init_lock:
            if self._encoder is None:
                return
            self._encoder.cpu()
            self._encoder = None
            self._tokenizer = None
        if torch.cuda.is_available():
            torch.cuda.empty_cache()


# module-level shared clients, one per (checkpoint, cased)
_shared_clients: dict[tuple[str, bool], EncoderClient] = {}
_shared_lock = Lock()


def get_shared_encoder(checkpoint: str, cased: bool = True) -> EncoderClient:
    with _shared_lock:
        client = _shared_clients.get((checkpoint, cased))
        if client is None:
            client = _shared_clients[(checkpoint, cased)] = EncoderClient(checkpoint, cased=cased)
        return client


def reset_shared_encoders() -> None:
    """Close and drop every shared encoder client."""
    with _shared_lock:
        clients = list(_shared_clients.values())
        _shared_clients.clear()
    for client in clients:
        client.close()
