"""Tokenization, vocabularies, frequency statistics, and JSONL ingestion."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from importlib import resources

PAD, UNK, BOS, EOS = 0, 1, 2, 3
RESERVED = ("<pad>", "<unk>", "<bos>", "<eos>")

# Punctuation marks emitted as standalone tokens.
_PUNCT = set(".,!?;:'\"")


def tokenize(text):
    """Lowercased tokens; punctuation marks split off as separate tokens."""
    out = []
    word = []
    for ch in text.lower():
        if ch.isspace():
            if word:
                out.append("".join(word))
                word = []
        elif ch in _PUNCT:
            if word:
                out.append("".join(word))
                word = []
            out.append(ch)
        else:
            word.append(ch)
    if word:
        out.append("".join(word))
    return out


@dataclass
class RawPair:
    message: str
    response: str


@dataclass
class LoadStats:
    kept: int = 0
    dropped_long: int = 0
    dropped_over_cap: int = 0


class DatasetError(ValueError):
    pass


def load_dataset(path, max_tokens=30, per_message_cap=None):
    """Read a JSONL file of {"message", "response"} objects.

    Pairs whose message or response exceeds `max_tokens` tokens are dropped.
    `per_message_cap`, when set, keeps at most that many responses per
    distinct message (in file order). Returns (pairs, LoadStats).
    """
    pairs = []
    stats = LoadStats()
    seen = Counter()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"{path}:{lineno}: malformed JSON ({e.msg})") from e
            for key in ("message", "response"):
                if key not in obj or not isinstance(obj[key], str):
                    raise DatasetError(f"{path}:{lineno}: missing string field {key!r}")
            message, response = obj["message"].strip(), obj["response"].strip()
            if not message or not response:
                raise DatasetError(f"{path}:{lineno}: empty message or response")
            if len(tokenize(message)) > max_tokens or len(tokenize(response)) > max_tokens:
                stats.dropped_long += 1
                continue
            if per_message_cap is not None:
                seen[message] += 1
                if seen[message] > per_message_cap:
                    stats.dropped_over_cap += 1
                    continue
            pairs.append(RawPair(message, response))
            stats.kept += 1
    return pairs, stats


class Vocab:
    """Token<->id bijection with reserved PAD/UNK/BOS/EOS slots."""

    def __init__(self, tokens, counts=None):
        self.id_to_token = list(RESERVED) + list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")
        self.counts = dict(counts or {})

    def __len__(self):
        return len(self.id_to_token)

    def __contains__(self, token):
        return token in self.token_to_id

    def encode(self, tokens):
        return [self.token_to_id.get(t, UNK) for t in tokens]

    def decode(self, ids):
        out = []
        for i in ids:
            if not 0 <= i < len(self.id_to_token):
                raise ValueError(f"id {i} outside vocabulary of size {len(self)}")
            out.append(self.id_to_token[i])
        return out

    def to_dict(self):
        return {"tokens": self.id_to_token[len(RESERVED):], "counts": self.counts}

    @classmethod
    def from_dict(cls, d):
        return cls(d["tokens"], d.get("counts"))


class FreqStats:
    """Response-side frequency statistics for copy-ratio and specificity.

    `doc_counts[t]` is the number of responses containing token t; `top_k`
    most frequent tokens plus the stopword set are excluded from copy-ratio
    counting. Specificity uses normalized inverse word frequency:
    IWF(w) = log(1 + total) / (1 + count(w)), min-max normalized to [0, 1].
    """

    def __init__(self, total_responses, doc_counts, stopwords, top_k, top_tokens=None):
        self.total_responses = total_responses
        self.doc_counts = dict(doc_counts)
        self.stopwords = set(stopwords)
        self.top_k = top_k
        if top_tokens is None:
            ranked = sorted(self.doc_counts, key=lambda t: (-self.doc_counts[t], t))
            top_tokens = ranked[:top_k]
        self.top_tokens = set(top_tokens)
        self.niwf = self._compute_niwf()

    def _compute_niwf(self):
        if not self.doc_counts:
            return {}
        iwf = {
            t: math.log(1.0 + self.total_responses) / (1.0 + c)
            for t, c in self.doc_counts.items()
        }
        lo, hi = min(iwf.values()), max(iwf.values())
        if hi == lo:
            return {t: 0.0 for t in iwf}
        return {t: (v - lo) / (hi - lo) for t, v in iwf.items()}

    def excluded(self, token):
        return token in self.stopwords or token in self.top_tokens

    def to_dict(self):
        return {
            "total_responses": self.total_responses,
            "doc_counts": self.doc_counts,
            "stopwords": sorted(self.stopwords),
            "top_k": self.top_k,
            "top_tokens": sorted(self.top_tokens),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            total_responses=d["total_responses"],
            doc_counts=d["doc_counts"],
            stopwords=set(d["stopwords"]),
            top_k=d["top_k"],
            top_tokens=set(d["top_tokens"]),
        )


def default_stopwords():
    text = resources.files("metawords").joinpath("data/stopwords.txt").read_text()
    return {line.strip() for line in text.splitlines() if line.strip()}


def load_stopwords(path):
    with open(path, encoding="utf-8") as fh:
        return {line.strip() for line in fh if line.strip()}


def build_vocab(pairs, max_size=30000, stopwords=None, top_k=1000):
    """Build (message vocab, response vocab, FreqStats) from raw pairs.

    Vocabularies keep the `max_size` most frequent tokens of their side;
    ties break by first occurrence. FreqStats counts, per token, the number
    of responses containing it; its top-k exclusion set breaks ties the
    same way.
    """
    if not pairs:
        raise ValueError("build_vocab: empty corpus")
    if max_size < 5:
        raise ValueError("build_vocab: max_size must be at least 5")

    def side_vocab(texts):
        counts = Counter()
        first = {}
        for text in texts:
            for tok in tokenize(text):
                counts[tok] += 1
                first.setdefault(tok, len(first))
        ranked = sorted(counts, key=lambda t: (-counts[t], first[t]))[:max_size]
        return Vocab(ranked, {t: counts[t] for t in ranked})

    msg_vocab = side_vocab(p.message for p in pairs)
    rsp_vocab = side_vocab(p.response for p in pairs)

    doc_counts = Counter()
    first_seen = {}
    for p in pairs:
        toks = tokenize(p.response)
        for tok in toks:
            first_seen.setdefault(tok, len(first_seen))
        for tok in set(toks):
            doc_counts[tok] += 1
    ranked = sorted(doc_counts, key=lambda t: (-doc_counts[t], first_seen[t]))
    stats = FreqStats(
        total_responses=len(pairs),
        doc_counts=dict(doc_counts),
        stopwords=stopwords if stopwords is not None else set(),
        top_k=top_k,
        top_tokens=ranked[:top_k],
    )
    return msg_vocab, rsp_vocab, stats
