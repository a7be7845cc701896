"""Tokenization, corpora, labeled datasets, and synthetic data builders.

The tokenizer splits on whitespace, falls back to characters for unknown
words, and hash-buckets characters it has never seen, so any text maps into
a fixed-size vocabulary. Ids 0/1/2 are PAD/MASK/CLS; the next block is the
hash buckets; regular tokens start at FIRST_REGULAR_ID.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError

PAD_ID = 0
MASK_ID = 1
CLS_ID = 2
NUM_HASH_BUCKETS = 64
FIRST_REGULAR_ID = 3 + NUM_HASH_BUCKETS


def _char_bucket(ch: str) -> int:
    digest = hashlib.blake2s(ch.encode("utf-8"), digest_size=4).digest()
    return 3 + int.from_bytes(digest, "little") % NUM_HASH_BUCKETS


class Tokenizer:
    """Whitespace tokenizer with character fallback and hash-bucketed OOV."""

    def __init__(self, vocab: dict[str, int], vocab_size: int):
        self.vocab = dict(vocab)
        self.vocab_size = vocab_size

    @classmethod
    def build(cls, lines, vocab_size: int) -> "Tokenizer":
        """Fixed-size vocabulary from a corpus: all seen characters first
        (so fallback always resolves), then words by frequency. Ordering is
        deterministic: (-count, token)."""
        if vocab_size <= FIRST_REGULAR_ID:
            raise ContractError(f"vocab_size must exceed {FIRST_REGULAR_ID} (special ids + hash buckets)")
        words: Counter = Counter()
        chars: Counter = Counter()
        for line in lines:
            for w in line.split():
                words[w] += 1
                chars.update(w)
        budget = vocab_size - FIRST_REGULAR_ID
        entries = sorted(chars.items(), key=lambda kv: (-kv[1], kv[0]))
        entries += [kv for kv in sorted(words.items(), key=lambda kv: (-kv[1], kv[0])) if kv[0] not in chars]
        vocab = {tok: FIRST_REGULAR_ID + i for i, (tok, _) in enumerate(entries[:budget])}
        return cls(vocab, vocab_size)

    def encode_word(self, word: str) -> list[int]:
        wid = self.vocab.get(word)
        if wid is not None:
            return [wid]
        return [self.vocab.get(ch, _char_bucket(ch)) for ch in word]

    def encode(self, text: str, max_len: int) -> list[int]:
        """[CLS] + token ids, truncated to max_len."""
        ids = [CLS_ID]
        for w in text.split():
            ids.extend(self.encode_word(w))
            if len(ids) >= max_len:
                break
        return ids[:max_len]

    def to_json(self) -> dict:
        return {"vocab_size": self.vocab_size, "vocab": self.vocab}

    @classmethod
    def from_json(cls, obj: dict) -> "Tokenizer":
        return cls(obj["vocab"], obj["vocab_size"])


def pad_batch(sequences: list[list[int]], max_len: int) -> np.ndarray:
    """Right-pad with PAD_ID into an int64 [batch, max_len] array."""
    out = np.full((len(sequences), max_len), PAD_ID, dtype=np.int64)
    for i, seq in enumerate(sequences):
        trimmed = seq[:max_len]
        out[i, : len(trimmed)] = trimmed
    return out


@dataclass
class DomainCorpus:
    """One domain's tokenized sequences."""

    name: str
    sequences: list[list[int]]
    vocab_size: int

    def __post_init__(self):
        for seq in self.sequences:
            if seq and max(seq) >= self.vocab_size:
                raise ContractError(f"corpus {self.name!r}: token id out of range for vocab {self.vocab_size}")

    def __len__(self) -> int:
        return len(self.sequences)


def load_corpus(path: str | Path, tokenizer: Tokenizer, max_len: int, name: str | None = None) -> DomainCorpus:
    """One UTF-8 document per line; blank lines are skipped."""
    path = Path(path)
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    seqs = [tokenizer.encode(ln, max_len) for ln in lines]
    return DomainCorpus(name=name or path.stem, sequences=seqs, vocab_size=tokenizer.vocab_size)


@dataclass
class LabeledDataset:
    """Encoded classification records plus the label vocabulary."""

    sequences: list[list[int]]
    labels: np.ndarray
    label_vocab: list[str]

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.size and self.labels.max() >= len(self.label_vocab):
            raise ContractError("label index outside label vocabulary")

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def num_classes(self) -> int:
        return len(self.label_vocab)


def load_jsonl_task(
    path: str | Path,
    tokenizer: Tokenizer,
    max_len: int,
    label_vocab: list[str] | None = None,
) -> LabeledDataset:
    """Line-delimited records with fields ``text`` and ``label``.

    With an explicit ``label_vocab``, unknown labels get index -1 (the
    evaluator counts them as wrong and warns once).
    """
    records = []
    for ln in Path(path).read_text(encoding="utf-8").splitlines():
        if ln.strip():
            records.append(json.loads(ln))
    if not records:
        raise ContractError(f"task file {path} is empty")
    if label_vocab is None:
        label_vocab = sorted({str(r["label"]) for r in records})
    index = {lab: i for i, lab in enumerate(label_vocab)}
    seqs = [tokenizer.encode(str(r["text"]), max_len) for r in records]
    labels = np.array([index.get(str(r["label"]), -1) for r in records], dtype=np.int64)
    ds = LabeledDataset.__new__(LabeledDataset)
    ds.sequences = seqs
    ds.labels = labels
    ds.label_vocab = list(label_vocab)
    return ds


# -- synthetic data ---------------------------------------------------------
#
# Two-domain setups use disjoint word alphabets ("aN" vs "bN") so each
# adapter can only have learned its own domain's statistics. Lines are
# near-deterministic word chains, which makes masked prediction learnable
# by a small model in a few hundred steps.


def synth_domain_lines(prefix: str, num_words: int, num_lines: int, line_len: int, seed: int) -> list[str]:
    rng = np.random.default_rng(seed)
    lines = []
    for _ in range(num_lines):
        start = int(rng.integers(num_words))
        words = [f"{prefix}{(start + j) % num_words}" for j in range(line_len)]
        lines.append(" ".join(words))
    return lines


def synth_task_records(
    prefix: str, num_words: int, num_records: int, line_len: int, seed: int
) -> list[dict]:
    """Balanced 2-class records: class 'lo' draws words from the bottom half
    of the alphabet, class 'hi' from the top half."""
    rng = np.random.default_rng(seed)
    half = num_words // 2
    records = []
    for i in range(num_records):
        label = "lo" if i % 2 == 0 else "hi"
        lo = 0 if label == "lo" else half
        words = [f"{prefix}{int(rng.integers(lo, lo + half))}" for _ in range(line_len)]
        records.append({"text": " ".join(words), "label": label})
    return records


def write_lines(path: str | Path, lines: list[str]) -> None:
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_jsonl(path: str | Path, records: list[dict]) -> None:
    Path(path).write_text("\n".join(json.dumps(r) for r in records) + "\n", encoding="utf-8")
