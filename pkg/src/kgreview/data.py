"""Review records, the word vocabulary and JSON-lines corpus I/O."""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import InputFileError

START, END, UNK = "<start>", "<end>", "<unk>"
SPECIALS = (START, END, UNK)
MAX_VOCAB = 30_000


@dataclass
class Sentence:
    tokens: list[str]
    pos: list[str] | None = None
    aspect: int | None = None

    def to_dict(self) -> dict:
        out = {"tokens": list(self.tokens)}
        if self.pos is not None:
            out["pos"] = list(self.pos)
        if self.aspect is not None:
            out["aspect"] = int(self.aspect)
        return out


@dataclass
class ReviewRecord:
    user: str
    item: str
    rating: int
    sentences: list[Sentence] = field(default_factory=list)

    @property
    def aspects(self) -> list[int | None]:
        return [s.aspect for s in self.sentences]

    @property
    def tokens(self) -> list[str]:
        return [t for s in self.sentences for t in s.tokens]

    def to_dict(self) -> dict:
        return {
            "user": self.user,
            "item": self.item,
            "rating": int(self.rating),
            "sentences": [s.to_dict() for s in self.sentences],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReviewRecord":
        sents = [Sentence(list(s["tokens"]), s.get("pos"), s.get("aspect")) for s in d["sentences"]]
        return cls(str(d["user"]), str(d["item"]), int(d["rating"]), sents)


def read_corpus(path) -> list[ReviewRecord]:
    path = Path(path)
    if not path.exists():
        raise InputFileError(path, "corpus file not found")
    records = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(ReviewRecord.from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise InputFileError(path, f"bad review record: {exc}", lineno) from None
    return records


def write_corpus(path, records: Iterable[ReviewRecord]):
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")


class Vocabulary:
    """Dense token ids; specials first, then words by frequency then spelling."""

    def __init__(self, words: Sequence[str]):
        self.itos = list(SPECIALS) + [w for w in words if w not in SPECIALS]
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    @classmethod
    def build(cls, sentences: Iterable[Sequence[str]], max_size: int = MAX_VOCAB,
              min_count: int = 1) -> "Vocabulary":
        """Top ``max_size`` words seen at least ``min_count`` times; the rest map to UNK."""
        counts = Counter(t for s in sentences for t in s)
        ranked = sorted(((w, c) for w, c in counts.items() if c >= min_count), key=lambda kv: (-kv[1], kv[0]))
        return cls([w for w, _ in ranked[:max_size]])

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    @property
    def start(self) -> int:
        return self.stoi[START]

    @property
    def end(self) -> int:
        return self.stoi[END]

    @property
    def unk(self) -> int:
        return self.stoi[UNK]

    def id(self, token: str) -> int:
        return self.stoi.get(token, self.unk)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()

    def to_list(self) -> list[str]:
        return list(self.itos)

    @classmethod
    def from_list(cls, itos: Sequence[str]) -> "Vocabulary":
        v = cls([])
        v.itos = list(itos)
        v.stoi = {w: i for i, w in enumerate(v.itos)}
        return v
