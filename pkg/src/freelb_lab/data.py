"""Whitespace tokenisation, TSV corpora and seeded synthetic tasks."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import Batch
from .tensor import RngState

PAD, UNK, CLS = "[PAD]", "[UNK]", "[CLS]"
PAD_ID, UNK_ID, CLS_ID = 0, 1, 2
RESERVED = (PAD, UNK, CLS)
SPLITS = ("train", "dev", "test")
TASKS = ("trigger-bigram", "parity-of-token")


def tokenize(text: str) -> list[str]:
    return text.lower().split()


@dataclass
class LabeledCorpus:
    examples: list
    num_classes: int = 2
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}")
        for label, text in self.examples:
            if not 0 <= label < self.num_classes:
                raise ValueError(f"label {label} outside [0, {self.num_classes})")
            if not text:
                raise ValueError("empty text")

    def __len__(self):
        return len(self.examples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([y for y, _ in self.examples], dtype=np.int64)

    @property
    def texts(self) -> list[str]:
        return [t for _, t in self.examples]


class Vocab:
    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[:3]) != RESERVED:
            raise ValueError(f"vocab must start with reserved tokens {RESERVED}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocab")
        self.tokens = tokens
        self.ids = {t: i for i, t in enumerate(tokens)}
        self.frozen = True

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.ids

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def encode_text(self, text: str) -> list[int]:
        return [self.ids.get(t, UNK_ID) for t in tokenize(text)]

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids if i not in (PAD_ID, CLS_ID)]

    def to_json(self) -> str:
        return json.dumps({"tokens": self.tokens}, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Vocab":
        return cls(json.loads(text)["tokens"])

    def save(self, path):
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def build_vocab(corpus: LabeledCorpus, min_count: int = 1) -> Vocab:
    """Tokens seen at least ``min_count`` times, by count (desc) then alphabetically."""
    if len(corpus) == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts = Counter(t for text in corpus.texts for t in tokenize(text))
    kept = sorted((t for t, c in counts.items() if c >= min_count and t not in RESERVED),
                  key=lambda t: (-counts[t], t))
    return Vocab(list(RESERVED) + kept)


def encode(corpus: LabeledCorpus, vocab: Vocab, max_len: int) -> Batch:
    """``[CLS]`` + token ids, truncated to ``max_len`` and right-padded."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    n = len(corpus)
    ids = np.zeros((n, max_len), dtype=np.int64)
    for i, text in enumerate(corpus.texts):
        row = ([CLS_ID] + vocab.encode_text(text))[:max_len]
        ids[i, :len(row)] = row
    mask = (ids != PAD_ID).astype(np.float64)
    return Batch(ids, mask, corpus.labels)


# ---------------------------------------------------------------------------
# TSV


def write_tsv(corpus: LabeledCorpus, path) -> None:
    lines = []
    header = dict(corpus.meta, split=corpus.split, num_classes=corpus.num_classes)
    lines.append("# " + json.dumps(header, sort_keys=True))
    for label, text in corpus.examples:
        if "\t" in text or "\n" in text:
            raise ValueError("texts may not contain tabs or newlines")
        lines.append(f"{label}\t{text}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_tsv(path, split: str | None = None, num_classes: int | None = None) -> LabeledCorpus:
    """Read ``label<TAB>text`` lines; ``#`` lines are comments (the first may hold JSON metadata)."""
    meta, examples = {}, []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                if not meta and not examples:
                    try:
                        meta = json.loads(line[1:].strip())
                    except json.JSONDecodeError:
                        meta = {}
                continue
            label, sep, text = line.partition("\t")
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected label<TAB>text")
            try:
                examples.append((int(label), text))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: label {label!r} is not an integer") from None
    if num_classes is None:
        num_classes = int(meta.get("num_classes", 0)) or max(2, max((y for y, _ in examples), default=0) + 1)
    split = split or meta.get("split", "train")
    meta = {k: v for k, v in meta.items() if k not in ("split", "num_classes")}
    return LabeledCorpus(examples, num_classes, split, meta)


# ---------------------------------------------------------------------------
# synthetic tasks


def _word(i: int) -> str:
    return f"w{i}"


def gen_synthetic(task: str, size: int, seq_len: int = 12, vocab_size: int = 40,
                  noise: float = 0.0, seed: int = 0, split: str = "train") -> LabeledCorpus:
    """Seeded binary task over the words ``w0 .. w{vocab_size-1}``.

    ``trigger-bigram``: label 1 iff ``w0 w1`` occurs.  Filler words exclude
    both trigger words; half the negatives carry one of them as a decoy.
    ``parity-of-token``: label is the parity of the number of ``w0`` tokens.
    Labels alternate before shuffling, so classes are balanced; ``noise``
    then flips that fraction of labels.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    if size <= 0:
        raise ValueError("size must be positive")
    if task == "trigger-bigram" and seq_len < 2:
        raise ValueError("trigger-bigram needs seq_len >= 2")
    if seq_len < 1 or vocab_size < 4:
        raise ValueError("need seq_len >= 1 and vocab_size >= 4")
    if not 0.0 <= noise <= 1.0:
        raise ValueError("noise must be in [0, 1]")
    rng = RngState(seed).child("gen", task, split)
    gen = rng.generator
    labels = np.arange(size) % 2
    rows = []
    for y in labels:
        if task == "trigger-bigram":
            words = list(gen.integers(2, vocab_size, seq_len))
            if y == 1:
                i = int(gen.integers(0, seq_len - 1))
                words[i], words[i + 1] = 0, 1
            elif gen.random() < 0.5:
                words[int(gen.integers(0, seq_len))] = int(gen.integers(0, 2))
        else:
            words = list(gen.integers(1, vocab_size, seq_len))
            counts = [c for c in range(min(seq_len, 5) + 1) if c % 2 == y]
            c = counts[int(gen.integers(0, len(counts)))]
            for pos in gen.choice(seq_len, size=c, replace=False):
                words[int(pos)] = 0
        rows.append(" ".join(_word(int(w)) for w in words))
    order = gen.permutation(size)
    labels, rows = labels[order], [rows[i] for i in order]
    flips = int(round(noise * size))
    if flips:
        idx = gen.choice(size, size=flips, replace=False)
        labels[idx] = 1 - labels[idx]
    meta = {"task": task, "size": size, "seq_len": seq_len, "vocab_size": vocab_size,
            "noise": noise, "seed": seed}
    return LabeledCorpus([(int(y), t) for y, t in zip(labels, rows)], 2, split, meta)
