"""Closed-vocabulary word tokenizer for template-generated text."""

from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Iterable

SPECIALS = ("[PAD]", "[CLS]", "[SEP]", "[MASK]", "[BOS]", "[EOS]", "[UNK]")
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")
_NO_SPACE_BEFORE = {",", ".", "?", "!", ";", ":"}


def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


def detokenize(tokens: Iterable[str]) -> str:
    out = ""
    for tok in tokens:
        if out and tok not in _NO_SPACE_BEFORE:
            out += " "
        out += tok
    return out


class Tokenizer:
    """Words and punctuation are separate, case-preserving tokens.

    ``decode(encode(s)) == s`` for in-vocabulary text written with single
    spaces and punctuation attached to the preceding word.
    """

    def __init__(self, words: Iterable[str]):
        self.itos: list[str] = list(SPECIALS)
        seen = set(self.itos)
        for w in words:
            if w not in seen:
                seen.add(w)
                self.itos.append(w)
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    PAD, CLS, SEP, MASK, BOS, EOS, UNK = range(7)

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Tokenizer":
        words = sorted({w for t in texts for w in split_words(t)})
        return cls(words)

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def vocab(self) -> dict[str, int]:
        return self.stoi

    def encode(self, text: str, bos_eos: bool = False) -> list[int]:
        ids = [self.stoi.get(w, self.UNK) for w in split_words(text)]
        if bos_eos:
            ids = [self.BOS] + ids + [self.EOS]
        return ids

    def decode(self, ids: Iterable[int], skip_special: bool = True) -> str:
        toks = []
        for i in ids:
            i = int(i)
            if skip_special and i < len(SPECIALS):
                if i == self.EOS:
                    break
                continue
            toks.append(self.itos[i])
        return detokenize(toks)

    def covers(self, text: str) -> bool:
        return all(w in self.stoi for w in split_words(text))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({"itos": self.itos}, indent=0) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Tokenizer":
        itos = json.loads(Path(path).read_text(encoding="utf-8"))["itos"]
        if tuple(itos[:len(SPECIALS)]) != SPECIALS:
            raise ValueError(f"{path}: special tokens missing or reordered")
        return cls(itos[len(SPECIALS):])
