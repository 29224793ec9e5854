"""Synthetic length/copy/specificity-controlled corpus.

Responses are deterministic functions of (message, sampled attributes):
given a target length, an utterance split flag, and copy/rare token counts,
the response is [copied message tokens][rare tokens][filler tokens] with
periods inserted by rule. Rare tokens are a fixed function of the first
message token, and fillers of the second, so a trained model can in
principle reproduce every response exactly. Filler tokens and the period
dominate response frequencies, which makes the standard top-k exclusion
(top_k=11 here) separate copy/rare tokens from scaffolding when extracting
copy ratio, and gives rare tokens the high normalized-inverse-frequency
scores that drive the specificity attribute.
"""

from __future__ import annotations

import numpy as np

from .corpus import RawPair

N_CONTENT = 50
N_FILLER = 10
N_RARE = 100

# top-k exclusion covering the period plus the ten fillers
SYNTHETIC_TOP_K = 11

MIN_LEN = 4
MAX_LEN = 16
MIN_SPLIT_LEN = 8  # two >=3-word utterances plus two periods


def content_token(i):
    return f"c{i % N_CONTENT:02d}"


def filler_token(i):
    return f"f{i % N_FILLER}"


def rare_token(i):
    return f"r{i % N_RARE:03d}"


def sample_message(rng):
    k = int(rng.integers(5, 8))
    ids = rng.choice(N_CONTENT, size=k, replace=False)
    return [content_token(i) for i in ids]


def build_response(message_tokens, length, split, n_copy, n_rare):
    """Deterministic response for a message and attribute choices."""
    periods = 2 if split else 1
    width = length - periods
    n_copy = min(n_copy, width, len(message_tokens))
    n_rare = min(n_rare, width - n_copy)
    first = int(message_tokens[0][1:])
    second = int(message_tokens[1][1:])
    content = list(message_tokens[:n_copy])
    content += [rare_token(2 * first + j) for j in range(n_rare)]
    content += [filler_token(second + j) for j in range(width - len(content))]
    if split:
        half = width // 2
        tokens = content[:half] + ["."] + content[half:] + ["."]
    else:
        tokens = content + ["."]
    return tokens


def sample_pair(rng):
    message = sample_message(rng)
    length = int(rng.integers(MIN_LEN, MAX_LEN + 1))
    split = bool(rng.integers(0, 2)) if length >= MIN_SPLIT_LEN else False
    width = length - (2 if split else 1)
    n_copy = int(rng.integers(0, min(3, width) + 1))
    n_rare = int(rng.integers(0, min(2, width - n_copy) + 1))
    response = build_response(message, length, split, n_copy, n_rare)
    return RawPair(" ".join(message), " ".join(response))


def make_pairs(n, seed):
    rng = np.random.default_rng([seed, 0x5EED])
    return [sample_pair(rng) for _ in range(n)]
