"""Generator model assembly: parameters plus the teacher-forced forward pass.

One decode step runs, in order: context attention with the previous decoder
state, the decoder GRU update, the panel state update with the new state,
difference reading, and finally word prediction from
[e(y_prev) || o_t || s_t]. With an empty attribute schema the panel is
skipped and o_t is zero, which reduces the model to a plain attention
encoder-decoder.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import gtmn, seq2seq
from .corpus import BOS, EOS, PAD, Vocab
from .metaword import MAX_RL, MetaWord, default_schema


@dataclass
class TrainingExample:
    message_tokens: list
    response_tokens: list
    metaword: MetaWord


@dataclass
class Batch:
    msg_ids: np.ndarray          # (B, Tx) int64
    msg_mask: np.ndarray         # (B, Tx) bool
    dec_in: np.ndarray           # (B, Td) int64, BOS + gold words
    gold: np.ndarray             # (B, Td) int64, gold words + EOS, PAD-padded
    step_mask: np.ndarray        # (B, Td) 1.0 at real prediction steps
    metawords: list
    word_mask: np.ndarray        # (B, Tw) 1.0 at word steps t <= T_i
    last_mask: np.ndarray        # (B, Tw) 1.0 exactly at t == T_i
    rl_target_ids: np.ndarray | None    # (Tw,) meta-vocab ids of min(t, 25)
    real_targets: dict = field(default_factory=dict)  # key -> (B, Tw) floats

    @property
    def size(self):
        return self.msg_ids.shape[0]


@dataclass
class ForwardResult:
    loss: ad.DiffTensor
    nll: ad.DiffTensor           # batch-mean negative log likelihood
    su: ad.DiffTensor | None     # batch-mean state update loss (None if skipped)
    token_nll_total: ad.DiffTensor
    token_count: int


class Generator:
    """GTMN-enhanced encoder-decoder over separate message/response vocabs."""

    def __init__(self, msg_vocab, rsp_vocab, schema, hidden_size, rng):
        self.msg_vocab = msg_vocab
        self.rsp_vocab = rsp_vocab
        self.schema = schema
        self.hidden_size = hidden_size
        d = hidden_size
        self.meta_vocab = gtmn.MetaVocab(schema.meta_tokens())
        params = {}
        params["emb.msg"] = seq2seq.embedding_param(rng, len(msg_vocab), d)
        params["emb.rsp"] = seq2seq.embedding_param(rng, len(rsp_vocab), d)
        seq2seq.add_gru_params(params, rng, "enc_fwd", d, d)
        seq2seq.add_gru_params(params, rng, "enc_bwd", d, d)
        seq2seq.add_attention_params(params, rng, d)
        seq2seq.add_decoder_params(params, rng, d, len(rsp_vocab))
        if len(schema):
            params["emb.meta"] = seq2seq.embedding_param(rng, len(self.meta_vocab), d)
            gtmn.add_gtmn_params(params, rng, d)
        self.params = params

    @property
    def num_cells(self):
        return len(self.schema)

    def parameters(self):
        return list(self.params.values())

    def zero_grads(self):
        ad.zero_grads(self.parameters())

    def init_panel(self, metawords):
        return gtmn.init_panel(
            metawords, self.schema, self.params["emb.meta"], self.meta_vocab
        )

    # -- teacher-forced forward ------------------------------------------------

    def forward_teacher(self, batch, su_weight=1.0, compute_su=None):
        """Mean NLL plus weighted state update loss over a padded batch.

        Padded prediction steps contribute exactly zero: their log-probs are
        multiplied by a zero mask before entering the sum.
        """
        p = self.params
        d = self.hidden_size
        B, Td = batch.gold.shape
        Tw = batch.word_mask.shape[1]
        vocab_size = len(self.rsp_vocab)
        if compute_su is None:
            compute_su = su_weight != 0.0 and self.num_cells > 0

        enc = seq2seq.encode(batch.msg_ids, batch.msg_mask, p, p["emb.msg"], d)
        att_keys = seq2seq.attention_keys(enc, p)
        s = seq2seq.init_decoder_state(enc, p)
        panel = self.init_panel(batch.metawords) if self.num_cells else None
        zero_o = ad.const(np.zeros((B, 1, d))) if panel is None else None

        su_ctx = self._su_context(batch) if compute_su else None
        picked_total = None
        su_total = None
        for t in range(Td):
            e_prev = ad.embedding_lookup(p["emb.rsp"], batch.dec_in[:, t:t + 1])
            context, _ = seq2seq.attention_context(s, enc, p, att_keys)
            s = seq2seq.advance_state(s, e_prev, context, p)
            if panel is not None:
                panel = gtmn.state_update(panel, s, p)
                o_t, _ = gtmn.difference_read(panel, s, p)
            else:
                o_t = zero_o
            logp = seq2seq.predict_log_probs(e_prev, o_t, s, p)
            pick = np.zeros((B, 1, vocab_size))
            rows = batch.step_mask[:, t] > 0.0
            pick[rows, 0, batch.gold[rows, t]] = 1.0
            picked = ad.reduce_sum(logp * ad.const(pick))
            picked_total = picked if picked_total is None else picked_total + picked
            if compute_su and t < Tw:
                term = self._su_step(panel, batch, su_ctx, t)
                su_total = term if su_total is None else su_total + term

        nll = ad.const(-1.0 / B) * picked_total
        su = ad.const(1.0 / B) * su_total if su_total is not None else None
        if su is not None and su_weight != 0.0:
            loss = nll + ad.const(float(su_weight)) * su
        else:
            loss = nll
        token_nll_total = ad.const(-1.0) * picked_total
        return ForwardResult(loss, nll, su, token_nll_total, int(batch.step_mask.sum()))

    def _su_context(self, batch):
        """Per-forward representations the state update targets reuse."""
        emb_meta = self.params["emb.meta"]
        ctx = {"real_key_sig": {}}
        for spec in self.schema:
            if spec.prefix_trackable and spec.kind == "real":
                key_rep = gtmn.bag_rep(emb_meta, self.meta_vocab.ids(spec.label))
                ctx["real_key_sig"][spec.key] = ad.sigmoid(key_rep)
        if batch.rl_target_ids is not None and any(
            s.key == "RL" for s in self.schema
        ):
            ctx["rl_reps"] = [
                ad.sigmoid(
                    ad.embedding_lookup(
                        emb_meta, batch.rl_target_ids[t].reshape(1, 1)
                    )
                )
                for t in range(batch.word_mask.shape[1])
            ]
        return ctx

    def _su_step(self, panel, batch, ctx, t):
        """One word step of the state update loss, all cells at once.

        Trackable variables compare the cell value against the prefix-feature
        representation at step t (weighted by the word mask); the rest compare
        against the goal, active only at each example's final word step.
        """
        B = batch.size
        ones_b = ad.const(np.ones((B, 1, 1)))
        targets = []
        masks = []
        for spec in self.schema:
            if spec.prefix_trackable:
                if spec.key == "RL":
                    targets.append(ones_b * ctx["rl_reps"][t])
                else:
                    vals = ad.const(batch.real_targets[spec.key][:, t].reshape(B, 1, 1))
                    targets.append(vals * ctx["real_key_sig"][spec.key])
                masks.append(batch.word_mask[:, t])
            else:
                idx = self.schema.keys.index(spec.key)
                targets.append(panel.goals[:, idx:idx + 1, :])
                masks.append(batch.last_mask[:, t])
        target = targets[0] if len(targets) == 1 else ad.concat(targets, axis=1)
        mask = np.stack(masks, axis=1).reshape(B, len(self.schema), 1)
        norms = ad.l2_norm(panel.values - target, axis=2)
        return ad.reduce_sum(norms * ad.const(mask))

    # -- inference-side single steps --------------------------------------------

    def encode_message(self, message_ids):
        ids = np.asarray(message_ids, dtype=np.int64).reshape(1, -1)
        if ids.shape[1] == 0:
            raise ValueError("empty message")
        enc = seq2seq.encode(
            ids, np.ones_like(ids, dtype=bool), self.params, self.params["emb.msg"],
            self.hidden_size,
        )
        return enc, seq2seq.init_decoder_state(enc, self.params)

    def decode_step(self, enc, att_keys, s_prev, prev_id, panel):
        """One greedy/beam decode step; returns (s_t, panel, probs, weights)."""
        p = self.params
        e_prev = ad.embedding_lookup(p["emb.rsp"], np.array([[prev_id]]))
        context, _ = seq2seq.attention_context(s_prev, enc, p, att_keys)
        s_t = seq2seq.advance_state(s_prev, e_prev, context, p)
        read_weights = None
        if panel is not None:
            panel = gtmn.state_update(panel, s_t, p)
            o_t, read_weights = gtmn.difference_read(panel, s_t, p)
        else:
            o_t = ad.const(np.zeros((1, 1, self.hidden_size)))
        probs = seq2seq.predict_probs(e_prev, o_t, s_t, p)
        return s_t, panel, probs, read_weights


def make_batch(examples, model, stats):
    """Assemble a padded Batch with teacher-forcing targets.

    Ground-truth prefixes of the gold response provide the per-step targets
    of the trackable variables; real-valued targets are extracted with the
    corpus frequency statistics used at annotation time.
    """
    from .metaword import prefix_feature

    B = len(examples)
    if B == 0:
        raise ValueError("make_batch: empty example list")
    msg_lens = [len(e.message_tokens) for e in examples]
    rsp_lens = [len(e.response_tokens) for e in examples]
    if min(msg_lens) == 0 or min(rsp_lens) == 0:
        raise ValueError("make_batch: empty message or response")
    Tx, Tw = max(msg_lens), max(rsp_lens)
    Td = Tw + 1

    msg_ids = np.full((B, Tx), PAD, dtype=np.int64)
    msg_mask = np.zeros((B, Tx), dtype=bool)
    dec_in = np.full((B, Td), PAD, dtype=np.int64)
    gold = np.full((B, Td), PAD, dtype=np.int64)
    step_mask = np.zeros((B, Td))
    word_mask = np.zeros((B, Tw))
    last_mask = np.zeros((B, Tw))

    for b, ex in enumerate(examples):
        mids = model.msg_vocab.encode(ex.message_tokens)
        rids = model.rsp_vocab.encode(ex.response_tokens)
        msg_ids[b, :len(mids)] = mids
        msg_mask[b, :len(mids)] = True
        dec_in[b, 0] = BOS
        dec_in[b, 1:len(rids) + 1] = rids
        gold[b, :len(rids)] = rids
        gold[b, len(rids)] = EOS
        step_mask[b, :len(rids) + 1] = 1.0
        word_mask[b, :len(rids)] = 1.0
        last_mask[b, len(rids) - 1] = 1.0

    rl_target_ids = None
    real_targets = {}
    trackable = [s for s in model.schema if s.prefix_trackable]
    if any(s.key == "RL" for s in trackable):
        rl_target_ids = np.array(
            [model.meta_vocab.ids([str(min(t + 1, MAX_RL))])[0] for t in range(Tw)],
            dtype=np.int64,
        )
    for spec in trackable:
        if spec.kind != "real":
            continue
        vals = np.zeros((B, Tw))
        for b, ex in enumerate(examples):
            toks = ex.response_tokens
            for t in range(len(toks)):
                vals[b, t] = prefix_feature(
                    spec.key, ex.message_tokens, toks[:t + 1], stats
                )
        real_targets[spec.key] = vals

    return Batch(
        msg_ids=msg_ids,
        msg_mask=msg_mask,
        dec_in=dec_in,
        gold=gold,
        step_mask=step_mask,
        metawords=[ex.metaword for ex in examples],
        word_mask=word_mask,
        last_mask=last_mask,
        rl_target_ids=rl_target_ids,
        real_targets=real_targets,
    )


def build_generator(msg_vocab, rsp_vocab, attributes, hidden_size, rng):
    schema = default_schema().subset(attributes)
    return Generator(msg_vocab, rsp_vocab, schema, hidden_size, rng)
