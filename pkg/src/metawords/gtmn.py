"""Goal-tracking memory network: state memory panel, gated SUB/ADD update,
and difference reading.

The panel holds one cell per meta-word variable: a key vector and a goal
vector frozen at initialization, and a value vector tracking expression
progress, updated after every decoder step. Cells are stacked into
(B, l, d) tensors so a whole batch's panels update in one pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .metaword import MetaWordError


def add_gtmn_params(params, rng, hidden_size):
    from .seq2seq import glorot, zeros_param

    d = hidden_size
    # The update inputs are key || value || state (3d); difference vectors
    # are (goal - value) || (goal * value) (2d).
    params["gtmn.Wg"] = glorot(rng, 3 * d, d)
    params["gtmn.bg"] = zeros_param(d)
    params["gtmn.Wsub"] = glorot(rng, 3 * d, d)
    params["gtmn.bsub"] = zeros_param(d)
    params["gtmn.Wadd"] = glorot(rng, 3 * d, d)
    params["gtmn.badd"] = zeros_param(d)
    params["gtmn.U"] = glorot(rng, 2 * d, d)


class MetaVocab:
    """Token index for the dedicated meta-word key/value embedding table."""

    def __init__(self, tokens):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def ids(self, text_or_tokens):
        tokens = (
            text_or_tokens.split() if isinstance(text_or_tokens, str) else text_or_tokens
        )
        try:
            return [self.index[t] for t in tokens]
        except KeyError as e:
            raise MetaWordError(f"token {e.args[0]!r} missing from meta-word embedding vocab") from e


def bag_rep(emb_table, ids):
    """Mean of token embeddings, shaped (1, 1, d) for panel stacking."""
    arr = np.asarray(ids, dtype=np.int64).reshape(1, 1, -1)
    return ad.reduce_mean(ad.embedding_lookup(emb_table, arr), axis=2)


def rep(variable, spec, emb_table, meta_vocab):
    """Key and goal vectors for one meta-word variable, each (1, 1, d).

    Categorical goals are sigmoid of the value embedding; real goals scale
    the sigmoid of the key representation by the value.
    """
    key_vec = bag_rep(emb_table, meta_vocab.ids(spec.label))
    if variable.kind == "categorical":
        goal = ad.sigmoid(bag_rep(emb_table, meta_vocab.ids([variable.value])))
    else:
        goal = ad.const(float(variable.value)) * ad.sigmoid(key_vec)
    return key_vec, goal


@dataclass
class StatePanel:
    """l memory cells stacked along axis 1; keys/goals frozen, values evolve."""

    keys: ad.DiffTensor      # (1, l, d)
    goals: ad.DiffTensor     # (B, l, d)
    values: ad.DiffTensor    # (B, l, d)
    var_keys: tuple          # cell order, one meta-word key per cell
    step: int = 0

    @property
    def num_cells(self):
        return len(self.var_keys)

    @property
    def batch(self):
        return self.goals.shape[0]

    def cell_goal(self, i):
        return self.goals[:, i:i + 1, :]

    def cell_value(self, i):
        return self.values[:, i:i + 1, :]


def init_panel(metawords, schema, emb_table, meta_vocab):
    """Build a panel for a batch of meta-words (all under the same schema).

    Value vectors start at exactly zero; keys and goals are never touched
    again by the update ops.
    """
    metawords = list(metawords)
    batch = len(metawords)
    if len(schema) == 0:
        raise MetaWordError("init_panel: schema has no variables")
    d = emb_table.shape[1]
    key_vecs = []
    goal_vecs = []
    for spec in schema:
        key_vecs.append(bag_rep(emb_table, meta_vocab.ids(spec.label)))
        if spec.kind == "categorical":
            ids = np.array(
                [meta_vocab.ids([mw.value(spec.key)])[0] for mw in metawords],
                dtype=np.int64,
            ).reshape(batch, 1)
            goal = ad.sigmoid(ad.embedding_lookup(emb_table, ids))
        else:
            vals = np.array(
                [float(mw.value(spec.key)) for mw in metawords]
            ).reshape(batch, 1, 1)
            goal = ad.const(vals) * ad.sigmoid(key_vecs[-1])
        goal_vecs.append(goal * ad.const(np.ones((batch, 1, 1))))
    keys = key_vecs[0] if len(schema) == 1 else ad.concat(key_vecs, axis=1)
    goals = goal_vecs[0] if len(schema) == 1 else ad.concat(goal_vecs, axis=1)
    values = ad.const(np.zeros((batch, len(schema), d)))
    return StatePanel(keys, goals, values, tuple(schema.keys))


def state_update(panel, s_t, params):
    """Gated SUB/ADD update of every cell value from the decoder state s_t.

    Keys and goals pass through untouched; only a fresh values tensor is
    produced, so panels can be shared and updated functionally.
    """
    batch, l, _ = panel.values.shape
    one = ad.const(1.0)
    tiled_keys = ad.const(np.ones((batch, 1, 1))) * panel.keys      # (B, l, d)
    tiled_state = ad.const(np.ones((1, l, 1))) * s_t                # (B, l, d)
    inputs = ad.concat([tiled_keys, panel.values, tiled_state], axis=2)
    gate = ad.sigmoid(inputs @ params["gtmn.Wg"] + params["gtmn.bg"])
    delta_sub = ad.sigmoid(inputs @ params["gtmn.Wsub"] + params["gtmn.bsub"])
    delta_add = ad.sigmoid(inputs @ params["gtmn.Wadd"] + params["gtmn.badd"])
    trimmed = panel.values - gate * delta_sub
    values = trimmed + (one - gate) * delta_add
    return StatePanel(panel.keys, panel.goals, values, panel.var_keys, panel.step + 1)


def difference_read(panel, s_t, params):
    """Attention over per-cell difference vectors; returns (o_t, weights).

    o_t is (B, 1, d); weights (B, l, 1) sum to 1 over cells.
    """
    if panel.num_cells < 1:
        raise MetaWordError("difference_read: panel has no cells")
    diff = panel.goals - panel.values
    prod = panel.goals * panel.values
    memory = ad.concat([diff, prod], axis=2)            # (B, l, 2d)
    projected = memory @ params["gtmn.U"]               # (B, l, d)
    scores = ad.reduce_sum(projected * s_t, axis=2, keepdims=True)
    weights = ad.softmax(scores, axis=1)
    o_t = ad.reduce_sum(weights * projected, axis=1, keepdims=True)
    return o_t, weights


def goal_distance(panel):
    """Per-cell L2 distance between value and goal; numpy (B, l) diagnostic."""
    delta = panel.goals.data - panel.values.data
    return np.sqrt((delta * delta).sum(axis=2))
