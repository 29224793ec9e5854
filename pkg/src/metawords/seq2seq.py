"""Bidirectional GRU encoder and attention GRU decoder primitives.

All functions are pure over a flat name -> DiffTensor parameter mapping and
operate on batched tensors: decoder states are (B, 1, d), encoder state
sequences are (B, T, 2d). Padded positions are handled with gated state
updates (a padded step keeps the previous hidden state), so the final
forward state and the position-0 backward state are exact for every
example in a ragged batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


def glorot(rng, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return ad.param(rng.uniform(-limit, limit, size=(fan_in, fan_out)))


def zeros_param(*shape):
    return ad.param(np.zeros(shape))


def embedding_param(rng, rows, d, scale=0.1):
    return ad.param(rng.normal(0.0, scale, size=(rows, d)))


def add_gru_params(params, rng, prefix, input_size, hidden_size):
    """Register the nine tensors of one GRU cell under `prefix`."""
    for gate in ("z", "r", "n"):
        params[f"{prefix}.Wx{gate}"] = glorot(rng, input_size, hidden_size)
        params[f"{prefix}.Wh{gate}"] = glorot(rng, hidden_size, hidden_size)
        params[f"{prefix}.b{gate}"] = zeros_param(hidden_size)


def gru_step(params, prefix, x, h):
    """One GRU cell update: x (B, 1, in), h (B, 1, d) -> (B, 1, d)."""
    p = params
    z = ad.sigmoid(x @ p[f"{prefix}.Wxz"] + h @ p[f"{prefix}.Whz"] + p[f"{prefix}.bz"])
    r = ad.sigmoid(x @ p[f"{prefix}.Wxr"] + h @ p[f"{prefix}.Whr"] + p[f"{prefix}.br"])
    n = ad.tanh(x @ p[f"{prefix}.Wxn"] + (r * h) @ p[f"{prefix}.Whn"] + p[f"{prefix}.bn"])
    one = ad.const(1.0)
    return (one - z) * h + z * n


@dataclass
class EncoderStates:
    """Per-position forward||backward states of the message encoder."""

    states: ad.DiffTensor        # (B, T, 2d)
    mask: np.ndarray             # (B, T) bool, True at real tokens
    fwd_last: ad.DiffTensor      # (B, 1, d) forward state at each true last token
    bwd_first: ad.DiffTensor     # (B, 1, d) backward state at position 0

    @property
    def length(self):
        return self.states.shape[1]


def encode(message_ids, mask, params, emb_table, hidden_size,
           prefixes=("enc_fwd", "enc_bwd")):
    """Run a biGRU over a padded batch of token id rows."""
    message_ids = np.asarray(message_ids, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    batch, length = message_ids.shape
    if length == 0 or not mask.any(axis=1).all():
        raise ValueError("encode: empty message in batch")

    def run(indices, prefix):
        h = ad.const(np.zeros((batch, 1, hidden_size)))
        out = [None] * length
        for t in indices:
            e_t = ad.embedding_lookup(emb_table, message_ids[:, t:t + 1])
            cand = gru_step(params, prefix, e_t, h)
            m = ad.const(mask[:, t:t + 1, None].astype(np.float64))
            h = m * cand + (ad.const(1.0) - m) * h
            out[t] = h
        return out, h

    fwd_states, fwd_last = run(range(length), prefixes[0])
    bwd_states, bwd_first = run(range(length - 1, -1, -1), prefixes[1])
    per_pos = [
        ad.concat([fwd_states[t], bwd_states[t]], axis=2) for t in range(length)
    ]
    states = per_pos[0] if length == 1 else ad.concat(per_pos, axis=1)
    return EncoderStates(states, mask, fwd_last, bwd_first)


def add_attention_params(params, rng, hidden_size):
    d = hidden_size
    params["att.Ws"] = glorot(rng, d, d)
    params["att.Wh"] = glorot(rng, 2 * d, d)
    params["att.bd"] = zeros_param(d)
    params["att.Ud"] = glorot(rng, d, 1)


def attention_keys(encoder_states, params):
    """Precompute W_h @ h_j for every source position (reused across steps)."""
    return encoder_states.states @ params["att.Wh"]


def attention_context(s_prev, encoder_states, params, keys=None):
    """Additive attention over source states; returns (context, weights).

    context is (B, 1, 2d); weights (B, T, 1) form a probability vector over
    unpadded source positions.
    """
    if keys is None:
        keys = attention_keys(encoder_states, params)
    act = ad.tanh(s_prev @ params["att.Ws"] + keys + params["att.bd"])
    scores = act @ params["att.Ud"]                      # (B, T, 1)
    weights = ad.softmax(scores, axis=1, mask=encoder_states.mask[:, :, None])
    context = ad.reduce_sum(weights * encoder_states.states, axis=1, keepdims=True)
    return context, weights


def add_decoder_params(params, rng, hidden_size, vocab_size):
    d = hidden_size
    params["init.W"] = glorot(rng, 2 * d, d)
    params["init.b"] = zeros_param(d)
    add_gru_params(params, rng, "dec", 3 * d, d)
    params["out.Wp"] = glorot(rng, 3 * d, vocab_size)
    params["out.bp"] = zeros_param(vocab_size)


def init_decoder_state(encoder_states, params):
    """s_0 from the forward-final and backward-initial encoder states."""
    summary = ad.concat([encoder_states.fwd_last, encoder_states.bwd_first], axis=2)
    return ad.tanh(summary @ params["init.W"] + params["init.b"])


def advance_state(s_prev, e_prev, context, params):
    """Decoder GRU update consuming the previous word embedding and context."""
    x = ad.concat([e_prev, context], axis=2)
    return gru_step(params, "dec", x, s_prev)


def word_logits(e_prev, o_t, s_t, params):
    feats = ad.concat([e_prev, o_t, s_t], axis=2)
    return feats @ params["out.Wp"] + params["out.bp"]


def predict_probs(e_prev, o_t, s_t, params):
    """Word distribution from [e(y_prev) || o_t || s_t]; rows sum to 1."""
    return ad.softmax(word_logits(e_prev, o_t, s_t, params), axis=2)


def predict_log_probs(e_prev, o_t, s_t, params):
    """Log word distribution; exact even when some logits saturate."""
    return ad.log_softmax(word_logits(e_prev, o_t, s_t, params), axis=2)


def decoder_step(s_prev, prev_ids, context, o_t, params, emb_table):
    """One full decoder step given a difference-read vector o_t.

    Returns (s_t, probs) with probs (B, 1, V). The surrounding decode loop
    normally computes s_t first (o_t is a function of s_t); this composition
    exists for callers that already hold o_t.
    """
    prev_ids = np.asarray(prev_ids, dtype=np.int64)
    e_prev = ad.embedding_lookup(emb_table, prev_ids)
    s_t = advance_state(s_prev, e_prev, context, params)
    probs = predict_probs(e_prev, o_t, s_t, params)
    return s_t, probs
