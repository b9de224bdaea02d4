"""Character-level vocabulary with reversible text/id mapping.

Six special tokens occupy the lowest ids; every other id is one
character. Specials are indivisible units that character splitting can
never produce, so round-tripping in-vocab text is exact.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .errors import DataError, VocabError

PAD = "<PAD>"
BOS = "<BOS>"
EOS = "<EOS>"
PATIENT = "<PAT>"
DOCTOR = "<DOC>"
UNK = "<UNK>"

SPECIALS = (PAD, BOS, EOS, PATIENT, DOCTOR, UNK)

# line-file escapes so one symbol always fits one line
_ESCAPES = {"\\": "\\\\", "\n": "\\n", "\r": "\\r", "\t": "\\t"}
_UNESCAPES = {v: k for k, v in _ESCAPES.items()}


@dataclass
class Vocab:
    symbol_to_id: dict[str, int]
    id_to_symbol: list[str] = field(init=False)

    def __post_init__(self):
        self.id_to_symbol = [""] * len(self.symbol_to_id)
        for sym, i in self.symbol_to_id.items():
            self.id_to_symbol[i] = sym

    def __len__(self) -> int:
        return len(self.symbol_to_id)

    @property
    def pad_id(self) -> int:
        return self.symbol_to_id[PAD]

    @property
    def bos_id(self) -> int:
        return self.symbol_to_id[BOS]

    @property
    def eos_id(self) -> int:
        return self.symbol_to_id[EOS]

    @property
    def patient_id(self) -> int:
        return self.symbol_to_id[PATIENT]

    @property
    def doctor_id(self) -> int:
        return self.symbol_to_id[DOCTOR]

    @property
    def unk_id(self) -> int:
        return self.symbol_to_id[UNK]

    def special_ids(self) -> set[int]:
        return {self.symbol_to_id[s] for s in SPECIALS}


def build_vocab(corpus) -> Vocab:
    """Build a vocabulary from dialogue turn texts.

    Specials take ids 0..5, then characters in order of first occurrence,
    so construction is deterministic and idempotent for a given corpus.
    """
    dialogues = list(corpus)
    if not dialogues:
        raise DataError("cannot build a vocabulary from an empty corpus")
    table: dict[str, int] = {s: i for i, s in enumerate(SPECIALS)}
    for dlg in dialogues:
        for turn in dlg.turns:
            for ch in turn.text:
                if ch not in table:
                    table[ch] = len(table)
    return Vocab(table)


def encode(text: str, vocab: Vocab) -> list[int]:
    """One id per character; unknown characters map to UNK."""
    unk = vocab.unk_id
    return [vocab.symbol_to_id.get(ch, unk) for ch in text]


def decode(ids, vocab: Vocab) -> str:
    """Inverse of encode on in-vocab text; specials render as their tags."""
    out = []
    n = len(vocab)
    for i in ids:
        i = int(i)
        if i < 0 or i >= n:
            raise VocabError(f"token id {i} out of range for vocab size {n}")
        out.append(vocab.id_to_symbol[i])
    return "".join(out)


def _escape(symbol: str) -> str:
    return "".join(_ESCAPES.get(ch, ch) for ch in symbol)


def _unescape(line: str) -> str:
    out = []
    i = 0
    while i < len(line):
        pair = line[i:i + 2]
        if pair in _UNESCAPES:
            out.append(_UNESCAPES[pair])
            i += 2
        else:
            out.append(line[i])
            i += 1
    return "".join(out)


def save_vocab(vocab: Vocab, path) -> None:
    """One symbol per line, line number = id; specials as literal tags."""
    with open(path, "w", encoding="utf-8") as fh:
        for sym in vocab.id_to_symbol:
            if sym in SPECIALS:
                fh.write(sym + "\n")
            else:
                fh.write(_escape(sym) + "\n")


def load_vocab(path) -> Vocab:
    table: dict[str, int] = {}
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open vocab file {path}: {exc}") from exc
    with fh:
        for i, line in enumerate(fh):
            line = line.rstrip("\n")
            sym = line if line in SPECIALS else _unescape(line)
            if sym in table:
                raise DataError(f"duplicate symbol at line {i} of {path}")
            table[sym] = i
    for i, s in enumerate(SPECIALS):
        if table.get(s) != i:
            raise DataError(f"vocab file {path} misses special {s} at id {i}")
    return Vocab(table)
