"""Word-level vocabulary shared by the decoder, the word-side detector and the metrics."""

from __future__ import annotations

import string
from pathlib import Path

PAD = "<pad>"
FULL_STOP = "."


class Vocabulary:
    """Token list where position is the id. Id 0 is PAD, id 1 is the full stop."""

    def __init__(self, words):
        tokens = [PAD, FULL_STOP]
        for w in words:
            if w not in tokens:
                tokens.append(w)
        self.tokens = tokens
        self._ids = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def stop_id(self) -> int:
        return 1

    def encode(self, text: str) -> list[int]:
        """Whitespace-split ``text``; a trailing full stop is appended if missing."""
        ids = []
        for word in text.split():
            if word not in self._ids:
                raise KeyError(f"unknown token {word!r}")
            ids.append(self._ids[word])
        if not ids or ids[-1] != self.stop_id:
            ids.append(self.stop_id)
        return ids

    def decode(self, ids) -> str:
        for i in ids:
            if not 0 <= int(i) < len(self.tokens):
                raise KeyError(f"token id {i} out of range")
        return " ".join(self.tokens[int(i)] for i in ids if int(i) != self.pad_id)

    def save(self, path):
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if lines[:2] != [PAD, FULL_STOP]:
            raise ValueError("vocabulary file must start with the PAD and full-stop tokens")
        return cls(lines[2:])


_PUNCT = set(string.punctuation)


def metric_tokens(text) -> list[str]:
    """Lower-cased words with punctuation-only tokens dropped; accepts a string or a word list."""
    words = text.split() if isinstance(text, str) else list(text)
    out = []
    for w in words:
        w = w.lower().strip(string.punctuation)
        if w and not set(w) <= _PUNCT:
            out.append(w)
    return out
