"""Meta-word schema and rule-based attribute extraction.

A meta-word is an ordered record of (key, type, value) variables describing
a response: length (RL), dialogue act (DA), multiple utterances (MU), copy
ratio (CR), and specificity (S). RL, CR, and S admit a per-prefix feature
function and drive the per-step half of the state update loss; DA and MU
are judged on the whole response only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

MAX_RL = 25
WH_WORDS = {"who", "what", "when", "where", "why", "how", "which"}
UTTERANCE_BREAKS = {".", "?", "!"}
MIN_UTTERANCE_WORDS = 3

DIALOGUE_ACTS = ("yes-no-question", "wh-question", "statement", "other")


class MetaWordError(ValueError):
    pass


@dataclass(frozen=True)
class VariableSpec:
    key: str                 # short identifier, e.g. "RL"
    label: str               # text embedded as the cell key, e.g. "response length"
    kind: str                # "categorical" | "real"
    categories: tuple = ()   # inventory for categorical variables
    prefix_trackable: bool = False  # has a per-prefix feature function


@dataclass(frozen=True)
class AttributeSchema:
    variables: tuple

    @property
    def schema_id(self):
        return "+".join(v.key for v in self.variables) if self.variables else "none"

    @property
    def keys(self):
        return [v.key for v in self.variables]

    def __len__(self):
        return len(self.variables)

    def __iter__(self):
        return iter(self.variables)

    def get(self, key):
        for v in self.variables:
            if v.key == key:
                return v
        raise MetaWordError(f"unknown meta-word variable {key!r}")

    def subset(self, keys):
        keys = list(keys)
        for k in keys:
            self.get(k)
        return AttributeSchema(tuple(v for v in self.variables if v.key in keys))

    def meta_tokens(self):
        """All tokens the key/value embedding table must cover."""
        tokens = []
        for v in self.variables:
            for tok in v.label.split():
                if tok not in tokens:
                    tokens.append(tok)
            for cat in v.categories:
                if cat not in tokens:
                    tokens.append(cat)
        return tokens


def default_schema():
    return AttributeSchema((
        VariableSpec("RL", "response length", "categorical",
                     tuple(str(i) for i in range(1, MAX_RL + 1)), prefix_trackable=True),
        VariableSpec("DA", "dialogue act", "categorical", DIALOGUE_ACTS),
        VariableSpec("MU", "multiple utterances", "categorical", ("true", "false")),
        VariableSpec("CR", "copy ratio", "real", prefix_trackable=True),
        VariableSpec("S", "specificity", "real", prefix_trackable=True),
    ))


@dataclass(frozen=True)
class MetaWordVariable:
    key: str
    kind: str
    value: object  # category token (str) or real in [0, 1]


@dataclass(frozen=True)
class MetaWord:
    variables: tuple
    schema_id: str = ""

    def __iter__(self):
        return iter(self.variables)

    def __len__(self):
        return len(self.variables)

    def get(self, key):
        for v in self.variables:
            if v.key == key:
                return v
        raise MetaWordError(f"meta-word has no variable {key!r}")

    def value(self, key):
        return self.get(key).value

    def to_dict(self):
        return {v.key: v.value for v in self.variables}

    @classmethod
    def from_dict(cls, d, schema):
        variables = []
        for spec in schema:
            if spec.key not in d:
                raise MetaWordError(f"missing meta-word variable {spec.key!r}")
            variables.append(make_variable(spec, d[spec.key]))
        return cls(tuple(variables), schema.schema_id)


def make_variable(spec, value):
    """Validate `value` against a VariableSpec and wrap it."""
    if spec.kind == "categorical":
        value = str(value).lower()
        if value not in spec.categories:
            raise MetaWordError(
                f"{spec.key}: {value!r} not in category inventory {list(spec.categories)}"
            )
        return MetaWordVariable(spec.key, "categorical", value)
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise MetaWordError(f"{spec.key}: value {value} outside [0, 1]")
    return MetaWordVariable(spec.key, "real", value)


# -----------------------------------------------------------------------------
# Extractors


def split_utterances(tokens):
    """Split on . ? ! into (words, terminator) spans; terminator may be None."""
    spans = []
    current = []
    for tok in tokens:
        if tok in UTTERANCE_BREAKS:
            spans.append((current, tok))
            current = []
        else:
            current.append(tok)
    if current:
        spans.append((current, None))
    return spans


def extract_rl(response_tokens):
    """Response length as a category token, clamped to the 1..25 range."""
    if not response_tokens:
        raise MetaWordError("empty response has no length attribute")
    return str(min(len(response_tokens), MAX_RL))


def extract_da(response_tokens):
    """Rule proxy dialogue act over a 4-act inventory.

    The first ?-terminated utterance decides between wh-question and
    yes-no-question; otherwise a response of at least 3 tokens is a
    statement, anything shorter is other.
    """
    for words, term in split_utterances(response_tokens):
        if term == "?":
            if words and words[0] in WH_WORDS:
                return "wh-question"
            return "yes-no-question"
    if len(response_tokens) >= MIN_UTTERANCE_WORDS:
        return "statement"
    return "other"


def extract_mu(response_tokens):
    """\"true\" iff more than one utterance of >= 3 words remains after splitting."""
    long_spans = [
        words for words, _ in split_utterances(response_tokens)
        if len(words) >= MIN_UTTERANCE_WORDS
    ]
    return "true" if len(long_spans) > 1 else "false"


def extract_cr(message_tokens, response_tokens, stats):
    """Copy ratio: distinct shared unigrams over non-excluded response tokens.

    Stopwords and the top-k frequent set are excluded from both sides of the
    ratio; an all-excluded response yields 0.
    """
    kept = [t for t in response_tokens if not stats.excluded(t)]
    if not kept:
        return 0.0
    message_set = {t for t in message_tokens if not stats.excluded(t)}
    shared = {t for t in kept if t in message_set}
    return len(shared) / len(kept)


def extract_s(response_tokens, stats):
    """Specificity: max normalized inverse word frequency over known tokens."""
    scores = [stats.niwf[t] for t in response_tokens if t in stats.niwf]
    return max(scores) if scores else 0.0


_EXTRACTORS = {
    "RL": lambda msg, rsp, stats: extract_rl(rsp),
    "DA": lambda msg, rsp, stats: extract_da(rsp),
    "MU": lambda msg, rsp, stats: extract_mu(rsp),
    "CR": lambda msg, rsp, stats: extract_cr(msg, rsp, stats),
    "S": lambda msg, rsp, stats: extract_s(rsp, stats),
}


def extract_metaword(message_tokens, response_tokens, schema, stats):
    """Extract one MetaWord for a (message, response) pair under `schema`."""
    variables = []
    for spec in schema:
        if spec.key not in _EXTRACTORS:
            raise MetaWordError(f"no extractor for variable {spec.key!r}")
        raw = _EXTRACTORS[spec.key](message_tokens, response_tokens, stats)
        variables.append(make_variable(spec, raw))
    return MetaWord(tuple(variables), schema.schema_id)


def prefix_feature(key, message_tokens, prefix_tokens, stats):
    """Ground-truth expression status of a trackable variable on a prefix.

    Only RL, CR, and S admit a prefix feature; DA and MU cannot be judged
    from a partial response and raise.
    """
    if key == "RL":
        return str(min(len(prefix_tokens), MAX_RL))
    if key == "CR":
        return extract_cr(message_tokens, prefix_tokens, stats)
    if key == "S":
        return extract_s(prefix_tokens, stats)
    raise MetaWordError(f"variable {key!r} has no prefix feature function")
