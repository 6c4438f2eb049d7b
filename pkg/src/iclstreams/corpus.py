"""Byte-level text ingestion and next-token batch sampling."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError

BOUNDARY = 256
VOCAB = 257
DOC_SEPARATOR = b"<|endoftext|>"


def encode(data: str | bytes) -> np.ndarray:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return np.frombuffer(bytes(data), dtype=np.uint8).astype(np.int64)


def decode(ids) -> bytes:
    """Bytes for ``ids``; boundary markers are dropped."""
    ids = np.asarray(ids, dtype=np.int64)
    return ids[ids < 256].astype(np.uint8).tobytes()


def decode_text(ids) -> str:
    return decode(ids).decode("utf-8", errors="replace")


@dataclass(frozen=True)
class TokenizedCorpus:
    tokens: np.ndarray  # int64 ids in [0, 257)
    doc_starts: tuple[int, ...]
    digest: str

    def __len__(self) -> int:
        return int(self.tokens.size)


def from_documents(docs: list[bytes]) -> TokenizedCorpus:
    h = hashlib.sha256()
    parts, starts, pos = [], [], 0
    for i, doc in enumerate(docs):
        h.update(len(doc).to_bytes(8, "little"))
        h.update(doc)
        if i:
            parts.append(np.array([BOUNDARY], dtype=np.int64))
            pos += 1
        starts.append(pos)
        parts.append(encode(doc))
        pos += len(doc)
    tokens = np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)
    return TokenizedCorpus(tokens=tokens, doc_starts=tuple(starts), digest=h.hexdigest())


def _split_docs(raw: bytes) -> list[bytes]:
    docs = [d.strip(b"\n") for d in raw.split(DOC_SEPARATOR)]
    return [d for d in docs if d] or ([raw] if raw else [])


def ingest(path) -> TokenizedCorpus:
    """Read a text file, or every regular file under a directory in sorted order.

    Documents are separated by ``<|endoftext|>`` inside a file and by file
    boundaries; a boundary token (256) is placed between documents.
    """
    path = Path(path)
    try:
        if path.is_dir():
            files = sorted(p for p in path.rglob("*") if p.is_file())
        else:
            files = [path]
        docs: list[bytes] = []
        for f in files:
            raw = f.read_bytes()
            docs.extend(_split_docs(raw) if raw else [])
    except OSError as exc:
        raise OSError(f"cannot read corpus at {path}: {exc.strerror or exc}") from exc
    return from_documents(docs)


def sample_lm_batch(corpus: TokenizedCorpus, context: int, batch: int,
                    rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random windows: inputs (batch, context) and the same windows shifted by one."""
    n = len(corpus)
    if n <= context:
        raise ConfigError(f"corpus has {n} tokens, need more than context={context}")
    starts = rng.integers(0, n - context, size=batch)
    idx = starts[:, None] + np.arange(context + 1)[None, :]
    win = corpus.tokens[idx]
    return win[:, :-1], win[:, 1:]
