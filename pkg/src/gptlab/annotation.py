"""Per-token lexical tags, entity flags, and the discrete splicing baseline."""
from __future__ import annotations

from enum import IntEnum
from typing import Callable, Iterable, Sequence

from .errors import ConfigError, SpanOutOfBoundsError
from .vocab import Vocab, encode

Tagger = Callable[[str], list[int]]


class LexTag(IntEnum):
    """Coarse lexical classes; OTHER keeps the embedding table total."""
    NOUN = 0
    ADJ = 1
    VERB = 2
    OTHER = 3


LEX_TABLE_SIZE = len(LexTag)
ENTITY_TABLE_SIZE = 2


def entity_flags(seq_len: int, token_spans: Iterable[tuple[int, int]]) -> list[int]:
    """Binary per-token membership in any half-open [start, end) span."""
    flags = [0] * seq_len
    for start, end in token_spans:
        if not (0 <= start < end <= seq_len):
            raise SpanOutOfBoundsError(
                f"token span [{start},{end}) outside sequence of length {seq_len}")
        for i in range(start, end):
            flags[i] = 1
    return flags


def dictionary_tagger(nouns: Sequence[str], adjectives: Sequence[str],
                      verbs: Sequence[str]) -> Tagger:
    """Longest-match-first lexicon tagger; unmatched characters get OTHER.

    A term listed under two classes is a configuration error, not a tie to
    break silently.
    """
    table: dict[str, LexTag] = {}
    for terms, tag in ((nouns, LexTag.NOUN), (adjectives, LexTag.ADJ),
                       (verbs, LexTag.VERB)):
        for term in terms:
            if not term:
                raise ConfigError("empty term in tagger lexicon")
            if term in table and table[term] != tag:
                raise ConfigError(
                    f"term {term!r} appears in two tagger lexicons")
            table[term] = tag
    # longest first; alphabetical tiebreak keeps scans deterministic
    ordered = sorted(table, key=lambda t: (-len(t), t))

    def tag_text(text: str) -> list[int]:
        tags = [int(LexTag.OTHER)] * len(text)
        i = 0
        while i < len(text):
            for term in ordered:
                if text.startswith(term, i):
                    tags[i:i + len(term)] = [int(table[term])] * len(term)
                    i += len(term)
                    break
            else:
                i += 1
        return tags

    return tag_text


def splice_entities(seq, entity_texts: Sequence[str], vocab: Vocab,
                    max_len: int):
    """Discrete-append baseline: original sequence, a separator marker,
    then the concatenated entity mentions.

    Appended tokens are OTHER/0, excluded from the loss, and the result is
    re-truncated to the most recent max_len tokens. PAD doubles as the
    separator: sequences are never padded, so the id is free.
    """
    from .corpus import TokenSequence

    if not entity_texts:
        return TokenSequence(ids=list(seq.ids),
                             lexical_tags=list(seq.lexical_tags),
                             entity_flags=list(seq.entity_flags),
                             loss_mask=list(seq.loss_mask),
                             position_ids=list(seq.position_ids))
    appended = [vocab.pad_id]
    for text in entity_texts:
        appended.extend(encode(text, vocab))
    ids = list(seq.ids) + appended
    tags = list(seq.lexical_tags) + [int(LexTag.OTHER)] * len(appended)
    flags = list(seq.entity_flags) + [0] * len(appended)
    mask = list(seq.loss_mask) + [False] * len(appended)
    if len(ids) > max_len:
        ids = ids[-max_len:]
        tags = tags[-max_len:]
        flags = flags[-max_len:]
        mask = mask[-max_len:]
    return TokenSequence(ids=ids, lexical_tags=tags, entity_flags=flags,
                         loss_mask=mask,
                         position_ids=list(range(len(ids))))
