"""Mutation parsing, sequence validation, and token encodings.

Two encodings share one fixed vocabulary. The standard layout is
[CLS] sequence [SEP] raw-mutation-text, where digits in the mutation
text have no vocabulary entry and fall through to [UNK]. The enhanced
layout splits the sequence at each mutation site and delimits the
original/replacement residues with [SEP] tokens, so every token stays
in-vocabulary.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

AMINO_ACIDS = "ACDEFGHIKLMNPQRSTVWY"

PAD, CLS, SEP, UNK = 0, 1, 2, 3

_SPECIALS = ("[PAD]", "[CLS]", "[SEP]", "[UNK]")

_MUT_RE = re.compile(r"^([A-Za-z])(\d+)([A-Za-z])$")


class MutationError(ValueError):
    """Mutation text failed to parse or disagrees with its sequence."""


class EncodingError(ValueError):
    """No valid token stream exists within the length budget."""


class Vocabulary:
    """Fixed token table: 4 specials then the 20 amino acids, ids 0-23."""

    def __init__(self):
        self.tokens = list(_SPECIALS) + list(AMINO_ACIDS)
        self.token_to_id = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def id_for(self, char: str) -> int:
        """Id for a single residue character; anything non-standard is [UNK]."""
        return self.token_to_id.get(char, UNK)

    def token_for(self, idx: int) -> str:
        return self.tokens[idx]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        vocab = cls()
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh if line.strip()]
        if tokens != vocab.tokens:
            raise MutationError(f"vocabulary file {path} does not match the fixed table")
        return vocab


@dataclass(frozen=True, order=True)
class Mutation:
    """Single substitution: `original` at 1-based `position` becomes `replacement`."""

    position: int
    original: str
    replacement: str

    def __str__(self) -> str:
        return f"{self.original}{self.position}{self.replacement}"


@dataclass
class TokenSequence:
    """Padded id stream with a {0,1} attention mask of equal length."""

    ids: list[int]
    mask: list[int]

    def __len__(self) -> int:
        return len(self.ids)


def parse_mutation(text: str) -> Mutation:
    """Parse one substitution of the form `R10A`."""
    m = _MUT_RE.match(text.strip())
    if m is None:
        raise MutationError(f"malformed mutation {text!r}: expected LETTER DIGITS LETTER")
    orig, pos, repl = m.group(1), int(m.group(2)), m.group(3)
    if orig not in AMINO_ACIDS:
        raise MutationError(f"mutation {text!r}: {orig!r} is not a standard amino acid")
    if repl not in AMINO_ACIDS:
        raise MutationError(f"mutation {text!r}: {repl!r} is not a standard amino acid")
    if pos < 1:
        raise MutationError(f"mutation {text!r}: position must be >= 1")
    if orig == repl:
        raise MutationError(f"mutation {text!r} is a no-op: original equals replacement")
    return Mutation(position=pos, original=orig, replacement=repl)


def parse_mutation_list(text: str) -> list[Mutation]:
    """Parse a ';'-separated mutation list, sorted ascending by position."""
    stripped = text.strip()
    if not stripped:
        return []
    muts = [parse_mutation(part) for part in stripped.split(";")]
    muts.sort(key=lambda m: m.position)
    for a, b in zip(muts, muts[1:]):
        if a.position == b.position:
            raise MutationError(f"duplicate mutation position {a.position} in {text!r}")
    return muts


def canonical_mutation_text(muts: list[Mutation]) -> str:
    """Position-sorted ';'-joined rendering, the identity key for a record."""
    return ";".join(str(m) for m in sorted(muts, key=lambda m: m.position))


def validate_against_sequence(seq: str, muts: list[Mutation]) -> None:
    """Confirm the sequence is standard-alphabet and each site carries its original residue."""
    if not seq:
        raise MutationError("empty sequence")
    for i, ch in enumerate(seq):
        if ch not in AMINO_ACIDS:
            raise MutationError(f"sequence position {i + 1}: {ch!r} is not a standard amino acid")
    for mut in muts:
        if mut.position > len(seq):
            raise MutationError(
                f"mutation {mut}: position {mut.position} exceeds sequence length {len(seq)}")
        found = seq[mut.position - 1]
        if found != mut.original:
            raise MutationError(
                f"mutation {mut}: position {mut.position} expected {mut.original!r}, found {found!r}")


def _pad(ids: list[int], max_len: int) -> TokenSequence:
    mask = [1] * len(ids) + [0] * (max_len - len(ids))
    return TokenSequence(ids=ids + [PAD] * (max_len - len(ids)), mask=mask)


def encode_standard(seq: str, mut_text: str, vocab: Vocabulary, max_len: int) -> TokenSequence:
    """[CLS] sequence [SEP] raw mutation characters, tail-truncated and padded.

    The mutation text is tokenized character by character, so digits (and
    the ';' separator) map to [UNK].
    """
    validate_against_sequence(seq, [])
    ids = [CLS] + [vocab.id_for(c) for c in seq] + [SEP]
    ids += [vocab.id_for(c) for c in mut_text.strip()]
    return _pad(ids[:max_len], max_len)


def _site_segments(seq: str, muts: list[Mutation], keep: set[int] | None) -> list[str]:
    # pieces between sorted mutation sites, mutated residue removed from each
    sites = [m.position - 1 for m in muts]
    bounds = [-1] + sites + [len(seq)]
    segments = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        chars = [seq[i] for i in range(lo + 1, hi) if keep is None or i in keep]
        segments.append("".join(chars))
    return segments


def encode_enhanced(seq: str, muts: list[Mutation], vocab: Vocabulary, max_len: int) -> TokenSequence:
    """[CLS] seg0 [SEP] orig [SEP] repl [SEP] seg1 ... segk, padded to max_len.

    When the full layout exceeds max_len, residues farthest from any
    mutation site are dropped first (ties keep the earlier position), so
    every structural token and an equal flank around each site survive.
    Valid input never produces an [UNK] id.
    """
    validate_against_sequence(seq, muts)
    muts = sorted(muts, key=lambda m: m.position)
    sites = [m.position - 1 for m in muts]

    total = 1 + (len(seq) - len(muts)) + 5 * len(muts)
    keep: set[int] | None = None
    if total > max_len:
        budget = max_len - 1 - 5 * len(muts)
        if budget < 0:
            raise EncodingError(
                f"{len(muts)} mutations need {1 + 5 * len(muts)} structural tokens, "
                f"over the max_len {max_len} budget")
        site_set = set(sites)
        candidates = [i for i in range(len(seq)) if i not in site_set]
        if sites:
            candidates.sort(key=lambda i: (min(abs(i - s) for s in sites), i))
        keep = set(candidates[:budget])

    segments = _site_segments(seq, muts, keep)
    ids = [CLS] + [vocab.id_for(c) for c in segments[0]]
    for mut, seg in zip(muts, segments[1:]):
        ids += [SEP, vocab.id_for(mut.original), SEP, vocab.id_for(mut.replacement), SEP]
        ids += [vocab.id_for(c) for c in seg]
    return _pad(ids, max_len)
