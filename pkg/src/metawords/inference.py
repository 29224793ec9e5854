"""Response decoding: greedy and beam search with goal tracking in the loop.

Every hypothesis carries its own state panel. Panel updates are functional
(a fresh values tensor per step), so sibling hypotheses extending the same
parent can never alias each other's memory state.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import gtmn
from .corpus import BOS, EOS, tokenize
from .metaword import MetaWord, MetaWordError, make_variable
from .predictor import sample_metaword
from .seq2seq import attention_keys
from .training import named_rng


@dataclass
class Hypothesis:
    token_ids: list
    log_prob: float
    state: object
    panel: object
    finished: bool = False

    def __len__(self):
        return len(self.token_ids)


def _step_log_probs(model, enc, att_keys, hyp):
    prev = hyp.token_ids[-1] if hyp.token_ids else BOS
    state, panel, probs, read_weights = model.decode_step(
        enc, att_keys, hyp.state, prev, hyp.panel
    )
    with np.errstate(divide="ignore"):
        logp = np.log(probs.data[0, 0])
    return state, panel, logp, read_weights


def beam_search(model, message_ids, metaword, beam_size=5, max_len=26,
                length_normalize=False):
    """Length-capped beam search; returns up to beam_size (ids, log_prob) pairs.

    Ranking is by accumulated log probability (optionally divided by length
    when length_normalize is set). Ties break deterministically by candidate
    insertion order.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be at least 1")
    enc, s0 = model.encode_message(message_ids)
    att_keys = attention_keys(enc, model.params)
    panel0 = model.init_panel([metaword]) if model.num_cells else None
    live = [Hypothesis([], 0.0, s0, panel0)]
    finished = []
    for _ in range(max_len):
        candidates = []
        for hyp in live:
            state, panel, logp, _ = _step_log_probs(model, enc, att_keys, hyp)
            order = np.argsort(-logp, kind="stable")[: beam_size + 1]
            for tid in order:
                candidates.append(
                    (hyp.log_prob + float(logp[tid]), int(tid), hyp, state, panel)
                )
        ranked = sorted(
            range(len(candidates)), key=lambda i: (-candidates[i][0], i)
        )[:beam_size]
        live = []
        for i in ranked:
            score, tid, hyp, state, panel = candidates[i]
            if tid == EOS:
                finished.append(Hypothesis(hyp.token_ids, score, state, panel, True))
            else:
                live.append(Hypothesis(hyp.token_ids + [tid], score, state, panel))
        if not live:
            break
    finished.extend(
        Hypothesis(h.token_ids, h.log_prob, h.state, h.panel, True) for h in live
    )

    def rank_key(h):
        return h.log_prob / max(len(h), 1) if length_normalize else h.log_prob

    finished.sort(key=rank_key, reverse=True)
    return [(h.token_ids, h.log_prob) for h in finished[:beam_size]]


def greedy_decode(model, message_ids, metaword, max_len=26):
    """Argmax decoding with per-step trace records.

    Each emitted word yields one record: (step, token id, per-cell goal
    distances, per-cell read attention weights). The terminating EOS step is
    not recorded, so the trace length equals the response length.
    """
    enc, s0 = model.encode_message(message_ids)
    att_keys = attention_keys(enc, model.params)
    panel = model.init_panel([metaword]) if model.num_cells else None
    hyp = Hypothesis([], 0.0, s0, panel)
    records = []
    for step in range(1, max_len + 1):
        state, panel, logp, read_weights = _step_log_probs(model, enc, att_keys, hyp)
        tid = int(np.argmax(logp))
        hyp = Hypothesis(
            hyp.token_ids + ([] if tid == EOS else [tid]),
            hyp.log_prob + float(logp[tid]),
            state, panel, tid == EOS,
        )
        if tid == EOS:
            break
        if panel is not None:
            records.append({
                "step": step,
                "token_id": tid,
                "distances": gtmn.goal_distance(panel)[0].tolist(),
                "attention": read_weights.data[0, :, 0].tolist(),
            })
        else:
            records.append({"step": step, "token_id": tid, "distances": [], "attention": []})
    return hyp, records


def resolve_metaword(schema, override=None, predictor=None, message_ids=None, rng=None):
    """Build the meta-word for one decode: overridden values win, the rest
    are sampled from the predictor's distributions."""
    override = dict(override or {})
    for key in override:
        schema.get(key)  # unknown variable -> error naming it
    missing = [s.key for s in schema if s.key not in override]
    sampled = {}
    if missing:
        if predictor is None:
            raise MetaWordError(
                f"no predictor available to sample variables {missing}"
            )
        drawn = sample_metaword(
            predictor.predict_distributions(message_ids), predictor.schema, rng
        )
        sampled = {k: drawn.value(k) for k in missing}
    values = {}
    for spec in schema:
        raw = override.get(spec.key, sampled.get(spec.key))
        values[spec.key] = make_variable(spec, raw).value
    return MetaWord.from_dict(values, schema)


def generate(model, message_text, override=None, n=1, predictor=None, seed=0,
             beam_size=5, max_len=26):
    """n (meta-word, response) pairs for one message.

    With a full override every draw reuses it; otherwise missing variables
    are sampled per draw. Returns dicts with the meta-word actually used,
    the response text, and its log probability.
    """
    tokens = tokenize(message_text)
    if not tokens:
        raise ValueError("empty message")
    message_ids = model.msg_vocab.encode(tokens)
    predictor_ids = (
        predictor.msg_vocab.encode(tokens) if predictor is not None else None
    )
    rng = named_rng(seed, "sampling")
    outputs = []
    for _ in range(n):
        metaword = resolve_metaword(
            model.schema, override, predictor, predictor_ids, rng
        ) if model.num_cells else MetaWord((), model.schema.schema_id)
        ranked = beam_search(model, message_ids, metaword, beam_size, max_len)
        ids, log_prob = ranked[0]
        outputs.append({
            "message": message_text,
            "metaword": metaword.to_dict(),
            "response": " ".join(model.rsp_vocab.decode(ids)),
            "log_prob": log_prob,
        })
    return outputs


def trace_decode(model, message_text, metaword, max_len=26):
    """Greedy decode returning (response tokens, per-step trace records)."""
    tokens = tokenize(message_text)
    if not tokens:
        raise ValueError("empty message")
    hyp, records = greedy_decode(
        model, model.msg_vocab.encode(tokens), metaword, max_len
    )
    response = model.rsp_vocab.decode(hyp.token_ids)
    for rec in records:
        rec["token"] = model.rsp_vocab.id_to_token[rec["token_id"]]
    return response, records


def trace_to_csv(records, var_keys):
    """Wide CSV: one row per step, distance and attention columns per cell."""
    buf = io.StringIO()
    writer = csv.writer(buf)
    header = ["step", "token"]
    header += [f"dist_{k}" for k in var_keys] + [f"attn_{k}" for k in var_keys]
    writer.writerow(header)
    for rec in records:
        row = [rec["step"], rec.get("token", rec["token_id"])]
        row += [f"{d:.6f}" for d in rec["distances"]]
        row += [f"{a:.6f}" for a in rec["attention"]]
        writer.writerow(row)
    return buf.getvalue()
