"""Report cleaning, tokenization, vocabulary, and sequence encoding.

The cleaning pass turns a raw report string into lowercase tokens with
all punctuation normalized to "," or ".", applying (in order) phrase
removal patterns, stopword deletion, and the punctuation map. Rules live
in a data file so the set can be swapped without code changes; the
default set ships with the package.
"""

from __future__ import annotations

import hashlib
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import DataError

PAD_ID, START_ID, END_ID, UNK_ID = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<start>", "<end>", "<unk>")

# words (optionally with internal apostrophes) or single punctuation chars
_TOKEN_RE = re.compile(r"[a-z0-9]+(?:'[a-z0-9]+)*|[^\sa-z0-9]")


@dataclass
class CleaningRules:
    remove: list[re.Pattern] = field(default_factory=list)
    stopwords: set[str] = field(default_factory=set)
    punct: dict[str, str] = field(default_factory=dict)
    version: str = "empty"

    @classmethod
    def parse(cls, source: str) -> "CleaningRules":
        remove, stopwords, punct = [], set(), {}
        section = None
        for lineno, raw in enumerate(source.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line in ("[remove]", "[stopwords]", "[punct]"):
                section = line[1:-1]
                continue
            if section == "remove":
                try:
                    remove.append(re.compile(line, re.IGNORECASE))
                except re.error as e:
                    raise DataError(f"rules line {lineno}: bad pattern {line!r}: {e}") from e
            elif section == "stopwords":
                stopwords.add(line.lower())
            elif section == "punct":
                parts = line.split()
                if len(parts) != 2 or len(parts[0]) != 1 or parts[1] not in (",", "."):
                    raise DataError(f"rules line {lineno}: expected '<char> ,|.', got {line!r}")
                punct[parts[0]] = parts[1]
            else:
                raise DataError(f"rules line {lineno}: content before any [section]")
        version = hashlib.sha256(source.encode("utf-8")).hexdigest()[:12]
        return cls(remove=remove, stopwords=stopwords, punct=punct, version=version)

    @classmethod
    def load(cls, path) -> "CleaningRules":
        with open(path, encoding="utf-8") as f:
            return cls.parse(f.read())

    @classmethod
    def default(cls) -> "CleaningRules":
        source = resources.files("xrgen.rules").joinpath("default_rules.txt").read_text("utf-8")
        return cls.parse(source)


@dataclass
class CleanedReport:
    sentences: list[list[str]]
    original: str

    @property
    def tokens(self) -> list[str]:
        return [t for s in self.sentences for t in s]

    @property
    def text(self) -> str:
        return tokens_to_text(self.tokens)

    def is_empty(self) -> bool:
        return not self.sentences


def tokens_to_text(tokens) -> str:
    """Join tokens with spaces, attaching "," and "." to the previous word."""
    parts = []
    for tok in tokens:
        if tok in (",", ".") or not parts:
            parts.append(tok)
        else:
            parts.append(" " + tok)
    return "".join(parts)


def _split_sentences(tokens):
    sentences, cur = [], []
    for tok in tokens:
        cur.append(tok)
        if tok == ".":
            sentences.append(cur)
            cur = []
    if cur:
        sentences.append(cur)
    return sentences


def clean_report(raw: str, rules: CleaningRules) -> CleanedReport:
    """Removal patterns, then stopword deletion, then punctuation
    normalization; lowercased, whitespace collapsed. Deterministic and
    idempotent at the token level. Empty output is legal."""
    text = raw
    for pat in rules.remove:
        text = pat.sub(" ", text)
    text = text.lower()
    out = []
    for tok in _TOKEN_RE.findall(text):
        if tok[0].isalnum():
            if tok in rules.stopwords:
                continue
            out.append(tok)
        else:
            mapped = rules.punct.get(tok)
            if mapped is None:
                continue
            if not out:
                continue  # no leading punctuation
            if out[-1] in (",", "."):
                out[-1] = mapped  # collapse runs, keeping the latest mark
            else:
                out.append(mapped)
    return CleanedReport(sentences=_split_sentences(out), original=raw)


def shuffle_sentences(report: CleanedReport, rng: np.random.Generator) -> CleanedReport:
    """Uniformly permute sentence order; token content is untouched."""
    perm = rng.permutation(len(report.sentences))
    return CleanedReport(
        sentences=[report.sentences[i] for i in perm],
        original=report.original,
    )


class Vocab:
    """token <-> id map with reserved PAD/START/END/UNK ids.

    Non-reserved ids are assigned by descending training frequency, ties
    broken lexicographically, so the map is a deterministic function of
    the corpus.
    """

    def __init__(self, entries):
        """entries: iterable of (token, freq) in final id order, ids from 4."""
        self.id_to_token = list(RESERVED_TOKENS)
        self.freqs = [0, 0, 0, 0]
        self.token_to_id = {}
        for tok, freq in entries:
            if tok in self.token_to_id or tok in RESERVED_TOKENS:
                raise DataError(f"vocab: duplicate or reserved token {tok!r}")
            self.token_to_id[tok] = len(self.id_to_token)
            self.id_to_token.append(tok)
            self.freqs.append(int(freq))

    def __len__(self):
        return len(self.id_to_token)

    def encode_token(self, tok: str) -> int:
        return self.token_to_id.get(tok, UNK_ID)

    def token(self, i: int) -> str:
        if not (0 <= i < len(self.id_to_token)):
            raise DataError(f"vocab: id {i} out of range (size {len(self.id_to_token)})")
        return self.id_to_token[i]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for i, tok in enumerate(self.id_to_token):
                f.write(f"{tok}\t{i}\t{self.freqs[i]}\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        entries = []
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f):
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 3:
                    raise DataError(f"vocab file line {lineno + 1}: expected 3 tab-separated fields")
                tok, ids, freq = parts
                if lineno < 4:
                    if tok != RESERVED_TOKENS[lineno] or int(ids) != lineno:
                        raise DataError(f"vocab file line {lineno + 1}: reserved ids must come first")
                    continue
                if int(ids) != len(entries) + 4:
                    raise DataError(f"vocab file line {lineno + 1}: ids must be dense and ordered")
                entries.append((tok, int(freq)))
        return cls(entries)


def build_vocab(corpus, min_freq: int = 5) -> Vocab:
    """Vocabulary over cleaned TRAINING reports; tokens below min_freq are
    dropped (they encode as UNK later)."""
    if not corpus:
        raise DataError("build_vocab: empty corpus")
    counts = Counter()
    for report in corpus:
        counts.update(report.tokens)
    kept = [(t, c) for t, c in counts.items() if c >= min_freq]
    kept.sort(key=lambda tc: (-tc[1], tc[0]))
    return Vocab(kept)


@dataclass
class EncodedSequence:
    """Fixed-length id layout [IMG-slot, START, w1..wk, END, PAD...].

    Position 0 is the image slot (filled with PAD as a placeholder, no
    token consumed); mask is 1 exactly on START..END and 0 on PAD
    positions and position 0.
    """

    ids: np.ndarray
    mask: np.ndarray


def encode_sequence(report: CleanedReport, vocab: Vocab, length: int = 33) -> EncodedSequence:
    if length < 4:
        raise DataError(f"encode_sequence: length {length} < 4")
    words = report.tokens[: length - 3]
    ids = np.full(length, PAD_ID, dtype=np.int64)
    mask = np.zeros(length, dtype=bool)
    ids[1] = START_ID
    for j, tok in enumerate(words):
        ids[2 + j] = vocab.encode_token(tok)
    ids[2 + len(words)] = END_ID
    mask[1: 3 + len(words)] = True
    return EncodedSequence(ids=ids, mask=mask)


def decode_sequence(ids, vocab: Vocab) -> str:
    """Token ids -> text. Stops at the first END; PAD and START are
    skipped; "," and "." attach to the preceding word."""
    toks = []
    for i in ids:
        i = int(i)
        tok = vocab.token(i)
        if i == END_ID:
            break
        if i in (PAD_ID, START_ID):
            continue
        toks.append(tok)
    return tokens_to_text(toks)
