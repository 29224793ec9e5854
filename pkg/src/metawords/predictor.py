"""Per-message meta-word distributions: estimation, training, and sampling.

A separate message biGRU feeds one head per schema variable: categorical
variables get a softmax head, real-valued ones a (mu, log sigma^2) pair.
Training maximizes data log likelihood plus a small entropy bonus that
keeps sampled meta-words diverse.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import seq2seq
from .corpus import PAD, Vocab
from .metaword import MetaWord, MetaWordError, default_schema, make_variable
from .training import (
    Checkpoint,
    TrainingError,
    adadelta_state,
    adadelta_step,
    iter_batches,
    named_rng,
    snapshot_params,
)

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class PredictorConfig:
    hidden_size: int = 32
    attributes: tuple = ("RL", "DA", "MU", "CR", "S")
    entropy_weight: float = 0.01
    batch_size: int = 32
    clip_norm: float = 5.0
    max_epochs: int = 30
    patience: int = 2
    seed: int = 0


@dataclass
class MetaWordDistribution:
    """Independent per-variable distributions for one message."""

    categorical: dict = field(default_factory=dict)  # key -> probability vector
    real: dict = field(default_factory=dict)         # key -> (mu, log_var)


class Predictor:
    def __init__(self, msg_vocab, schema, hidden_size, rng):
        self.msg_vocab = msg_vocab
        self.schema = schema
        self.hidden_size = hidden_size
        d = hidden_size
        params = {}
        params["emb"] = seq2seq.embedding_param(rng, len(msg_vocab), d)
        seq2seq.add_gru_params(params, rng, "p_fwd", d, d)
        seq2seq.add_gru_params(params, rng, "p_bwd", d, d)
        for spec in schema:
            if spec.kind == "categorical":
                params[f"head.{spec.key}.W"] = seq2seq.glorot(rng, 2 * d, len(spec.categories))
                params[f"head.{spec.key}.b"] = seq2seq.zeros_param(len(spec.categories))
            else:
                for part in ("mu", "sig"):
                    params[f"head.{spec.key}.W{part}"] = seq2seq.glorot(rng, 2 * d, 1)
                    params[f"head.{spec.key}.b{part}"] = seq2seq.zeros_param(1)
        self.params = params

    def parameters(self):
        return list(self.params.values())

    def encode(self, msg_ids, mask):
        """Final biGRU summary of a padded message batch, (B, 1, 2d)."""
        enc = seq2seq.encode(
            msg_ids, mask, self.params, self.params["emb"], self.hidden_size,
            prefixes=("p_fwd", "p_bwd"),
        )
        return ad.concat([enc.fwd_last, enc.bwd_first], axis=2)

    def head_outputs(self, h):
        """Per-variable head tensors from the message summary."""
        out = {}
        for spec in self.schema:
            if spec.kind == "categorical":
                out[spec.key] = h @ self.params[f"head.{spec.key}.W"] + self.params[f"head.{spec.key}.b"]
            else:
                mu = h @ self.params[f"head.{spec.key}.Wmu"] + self.params[f"head.{spec.key}.bmu"]
                log_var = h @ self.params[f"head.{spec.key}.Wsig"] + self.params[f"head.{spec.key}.bsig"]
                out[spec.key] = (mu, log_var)
        return out

    def predict_distributions(self, message_ids):
        """Distributions for one message; pure numpy outputs."""
        ids = np.asarray(message_ids, dtype=np.int64).reshape(1, -1)
        if ids.shape[1] == 0:
            raise ValueError("empty message")
        h = self.encode(ids, np.ones_like(ids, dtype=bool))
        dist = MetaWordDistribution()
        for spec in self.schema:
            head = self.head_outputs(h)[spec.key]
            if spec.kind == "categorical":
                logits = head.data[0, 0]
                e = np.exp(logits - logits.max())
                dist.categorical[spec.key] = e / e.sum()
            else:
                mu, log_var = head
                dist.real[spec.key] = (float(mu.data[0, 0, 0]), float(log_var.data[0, 0, 0]))
        return dist

    def forward_loss(self, msg_ids, mask, targets, entropy_weight):
        """Batch-mean NLL of gold meta-words minus the entropy bonus."""
        B = msg_ids.shape[0]
        h = self.encode(msg_ids, mask)
        heads = self.head_outputs(h)
        total = None
        for spec in self.schema:
            if spec.kind == "categorical":
                logits = heads[spec.key]
                logp = ad.log_softmax(logits, axis=2)
                pick = np.zeros(logits.shape)
                pick[np.arange(B), 0, targets[spec.key]] = 1.0
                nll = ad.const(-1.0) * ad.reduce_sum(logp * ad.const(pick))
                probs = ad.softmax(logits, axis=2)
                entropy = ad.const(-1.0) * ad.reduce_sum(probs * logp)
            else:
                mu, log_var = heads[spec.key]
                v = ad.const(targets[spec.key].reshape(B, 1, 1))
                sq = (v - mu) * (v - mu)
                precision = ad.exp(ad.const(-1.0) * log_var)
                nll = ad.const(0.5) * ad.reduce_sum(
                    ad.const(LOG_2PI) + log_var + sq * precision
                )
                entropy = ad.const(0.5) * ad.reduce_sum(
                    ad.const(LOG_2PI + 1.0) + log_var
                )
            term = nll + ad.const(-float(entropy_weight)) * entropy
            total = term if total is None else total + term
        return ad.const(1.0 / B) * total


def sample_metaword(distribution, schema, rng):
    """Draw one meta-word; categorical by inverse CDF, real by clamped normal."""
    variables = []
    for spec in schema:
        if spec.kind == "categorical":
            probs = distribution.categorical[spec.key]
            u = rng.random()
            idx = int(np.searchsorted(np.cumsum(probs), u))
            idx = min(idx, len(spec.categories) - 1)
            variables.append(make_variable(spec, spec.categories[idx]))
        else:
            mu, log_var = distribution.real[spec.key]
            value = mu + math.exp(0.5 * log_var) * rng.standard_normal()
            variables.append(make_variable(spec, min(1.0, max(0.0, value))))
    return MetaWord(tuple(variables), schema.schema_id)


def make_predictor_batch(examples, predictor):
    B = len(examples)
    msg_lens = [len(e.message_tokens) for e in examples]
    Tx = max(msg_lens)
    msg_ids = np.full((B, Tx), PAD, dtype=np.int64)
    mask = np.zeros((B, Tx), dtype=bool)
    targets = {}
    for spec in predictor.schema:
        if spec.kind == "categorical":
            targets[spec.key] = np.zeros(B, dtype=np.int64)
        else:
            targets[spec.key] = np.zeros(B)
    for b, ex in enumerate(examples):
        ids = predictor.msg_vocab.encode(ex.message_tokens)
        msg_ids[b, :len(ids)] = ids
        mask[b, :len(ids)] = True
        for spec in predictor.schema:
            value = ex.metaword.value(spec.key)
            if spec.kind == "categorical":
                targets[spec.key][b] = spec.categories.index(value)
            else:
                targets[spec.key][b] = float(value)
    return msg_ids, mask, targets


def train_predictor(train_examples, val_examples, msg_vocab, config, log_fn=None):
    """Fit the predictor with early stopping on validation loss."""
    if not train_examples or not val_examples:
        raise TrainingError("train_predictor: empty train or validation split")
    schema = default_schema().subset(config.attributes)
    model = Predictor(msg_vocab, schema, config.hidden_size, named_rng(config.seed, "init"))
    batch_rng = named_rng(config.seed, "batching")
    opt_state = adadelta_state(model.params)

    def dataset_loss(examples):
        total = 0.0
        for start in range(0, len(examples), config.batch_size):
            chunk = examples[start:start + config.batch_size]
            ids, mask, targets = make_predictor_batch(chunk, model)
            loss = model.forward_loss(ids, mask, targets, config.entropy_weight)
            total += loss.item() * len(chunk)
        return total / len(examples)

    best = float("inf")
    best_params = snapshot_params(model)
    history = []
    stagnant = 0
    for epoch in range(1, config.max_epochs + 1):
        epoch_loss = 0.0
        n_batches = 0
        for chunk in iter_batches(train_examples, config.batch_size, batch_rng):
            ids, mask, targets = make_predictor_batch(chunk, model)
            ad.zero_grads(model.parameters())
            with ad.Tape():
                loss = model.forward_loss(ids, mask, targets, config.entropy_weight)
                ad.backward(loss)
            grads = {
                name: t.grad if t.grad is not None else np.zeros_like(t.data)
                for name, t in model.params.items()
            }
            adadelta_step(model.params, grads, opt_state, clip_norm=config.clip_norm)
            epoch_loss += loss.item()
            n_batches += 1
        val_loss = dataset_loss(val_examples)
        record = {"epoch": epoch, "train_loss": epoch_loss / max(n_batches, 1), "val_loss": val_loss}
        history.append(record)
        if log_fn is not None:
            log_fn(record)
        if val_loss < best:
            best = val_loss
            best_params = snapshot_params(model)
            stagnant = 0
        else:
            stagnant += 1
        if stagnant >= config.patience:
            break

    for name, tensor in model.params.items():
        tensor.data = best_params[name].copy()
    checkpoint = Checkpoint(
        kind="predictor",
        config={
            "hidden_size": config.hidden_size,
            "attributes": list(config.attributes),
            "entropy_weight": config.entropy_weight,
            "seed": config.seed,
        },
        vocabs={"message": msg_vocab.to_dict()},
        params=best_params,
        history=history,
    )
    return checkpoint, model


def predictor_from_checkpoint(checkpoint):
    if checkpoint.kind != "predictor":
        raise ValueError(f"checkpoint holds a {checkpoint.kind!r} model")
    msg_vocab = Vocab.from_dict(checkpoint.vocabs["message"])
    schema = default_schema().subset(checkpoint.config["attributes"])
    model = Predictor(
        msg_vocab, schema, checkpoint.config["hidden_size"], np.random.default_rng(0)
    )
    for name, tensor in model.params.items():
        if name not in checkpoint.params:
            raise ValueError(f"checkpoint missing parameter {name!r}")
        tensor.data = checkpoint.params[name].copy()
    return model
