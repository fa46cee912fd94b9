"""Byte-level corpus loading, contiguous train/validation split, batch sampling."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

VOCAB_SIZE = 256
DEFAULT_VAL_FRACTION = 0.1
BUNDLED_CORPUS = "tinytales.txt"


class CorpusError(ValueError):
    pass


def tokenize(text: str | bytes) -> np.ndarray:
    raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def detokenize(ids) -> bytes:
    return np.asarray(ids, dtype=np.uint8).tobytes()


@dataclass(frozen=True)
class Corpus:
    train_tokens: np.ndarray
    val_tokens: np.ndarray
    digest: str
    split_ratio: float
    source: str = ""
    vocab_size: int = VOCAB_SIZE

    @property
    def n_tokens(self) -> int:
        return len(self.train_tokens) + len(self.val_tokens)

    def info(self) -> dict:
        return {"source": self.source, "sha256": self.digest, "split_ratio": self.split_ratio,
                "vocab_size": self.vocab_size, "n_tokens": self.n_tokens,
                "n_train": len(self.train_tokens), "n_val": len(self.val_tokens)}


def bundled_corpus_path() -> Path:
    return Path(str(resources.files("moegap") / "corpus" / BUNDLED_CORPUS))


def corpus_from_bytes(raw: bytes, split_ratio: float = DEFAULT_VAL_FRACTION, source: str = "") -> Corpus:
    """Split ``raw`` so the trailing ``split_ratio`` fraction becomes validation data."""
    if not raw:
        raise CorpusError(f"corpus {source or '<bytes>'} is empty")
    if not 0.0 < split_ratio < 1.0:
        raise CorpusError(f"split_ratio must be in (0, 1) so validation data exists, got {split_ratio}")
    tokens = tokenize(raw)
    n_val = int(round(len(tokens) * split_ratio))
    if n_val < 1 or n_val >= len(tokens):
        raise CorpusError(f"split_ratio={split_ratio} leaves an empty split for {len(tokens)} tokens")
    cut = len(tokens) - n_val
    digest = hashlib.sha256(raw).hexdigest()
    return Corpus(tokens[:cut], tokens[cut:], digest, split_ratio, source)


def load_corpus(path=None, split_ratio: float = DEFAULT_VAL_FRACTION, seed: int = 0) -> Corpus:
    """Read a text file as bytes.  ``seed`` is accepted for interface symmetry;
    the contiguous split does not consume randomness."""
    path = bundled_corpus_path() if path is None else Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CorpusError(f"cannot read corpus {path}: {exc}") from exc
    return corpus_from_bytes(raw, split_ratio, str(path))


def window_starts(n_tokens: int, batch_size: int, seq_len: int, rng: np.random.Generator) -> np.ndarray:
    if seq_len + 1 > n_tokens:
        raise CorpusError(f"corpus of {n_tokens} tokens is too short for seq_len={seq_len}")
    return rng.integers(0, n_tokens - seq_len, size=batch_size)


def sample_batch(corpus: Corpus, batch_size: int, seq_len: int,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Uniform random training windows; targets are the inputs shifted by one."""
    tokens = corpus.train_tokens
    starts = window_starts(len(tokens), batch_size, seq_len, rng)
    idx = starts[:, None] + np.arange(seq_len + 1)
    windows = tokens[idx]
    return windows[:, :-1], windows[:, 1:]


def eval_windows(tokens: np.ndarray, seq_len: int, max_tokens: int) -> tuple[np.ndarray, np.ndarray]:
    """Consecutive non-overlapping windows from the head of ``tokens``, up to ``max_tokens`` targets."""
    n_windows = min(max_tokens // seq_len, (len(tokens) - 1) // seq_len)
    if n_windows < 1:
        raise CorpusError(f"{len(tokens)} tokens cannot fill one evaluation window of {seq_len}")
    idx = np.arange(n_windows)[:, None] * seq_len + np.arange(seq_len + 1)
    windows = tokens[idx]
    return windows[:, :-1], windows[:, 1:]
