"""Shared builders for micro-scale models and synthetic training setups."""

import numpy as np

from metawords.corpus import RawPair, build_vocab, tokenize
from metawords.metaword import default_schema, extract_metaword
from metawords.model import Generator, TrainingExample, make_batch
from metawords.synthetic import SYNTHETIC_TOP_K, make_pairs
from metawords.training import named_rng


def micro_corpus(seed, n_tokens=16, n_pairs=4, msg_len=3, rsp_len=(3, 2)):
    """A handful of random-token pairs over a tiny vocabulary."""
    rng = np.random.default_rng([seed, 17])
    tokens = [f"w{i}" for i in range(n_tokens)]
    pairs = []
    for i in range(n_pairs):
        msg = rng.choice(tokens, size=msg_len, replace=True)
        rsp = rng.choice(tokens, size=rsp_len[i % len(rsp_len)], replace=True)
        pairs.append(RawPair(" ".join(msg), " ".join(rsp)))
    return pairs


def micro_setup(seed, d=3, n_tokens=16, n_pairs=2, attributes=None):
    """Micro generator + one teacher-forcing batch over all pairs."""
    pairs = micro_corpus(seed, n_tokens=n_tokens, n_pairs=n_pairs)
    msg_vocab, rsp_vocab, stats = build_vocab(pairs, max_size=n_tokens + 10, top_k=0)
    schema = default_schema()
    if attributes is not None:
        schema = schema.subset(attributes)
    examples = []
    for p in pairs:
        msg, rsp = tokenize(p.message), tokenize(p.response)
        examples.append(
            TrainingExample(msg, rsp, extract_metaword(msg, rsp, schema, stats))
        )
    model = Generator(msg_vocab, rsp_vocab, schema, d, named_rng(seed, "init"))
    batch = make_batch(examples, model, stats)
    return model, batch, examples, stats


def synthetic_setup(n_pairs, seed, attributes=("RL", "DA", "MU", "CR", "S")):
    """Annotated synthetic corpus split plus vocab/stats."""
    pairs = make_pairs(n_pairs, seed)
    msg_vocab, rsp_vocab, stats = build_vocab(
        pairs, max_size=400, top_k=SYNTHETIC_TOP_K
    )
    schema = default_schema().subset(attributes)
    examples = []
    for p in pairs:
        msg, rsp = tokenize(p.message), tokenize(p.response)
        examples.append(
            TrainingExample(msg, rsp, extract_metaword(msg, rsp, schema, stats))
        )
    return examples, msg_vocab, rsp_vocab, stats, schema
