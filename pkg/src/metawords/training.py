"""Losses, Adadelta optimization, and the training loop.

The objective is mean negative log likelihood plus a weighted state update
loss. The state update loss ties each tracked cell's value vector to the
representation of its ground-truth prefix feature at every word step, and
the remaining cells to their goal vectors at the final word step.
"""

from __future__ import annotations

import json
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .corpus import Vocab, tokenize
from .metaword import MetaWord, default_schema
from .model import Batch, Generator, TrainingExample, make_batch


class TrainingError(RuntimeError):
    pass


def named_rng(seed, stream):
    """Independent deterministic substream of a single run seed."""
    return np.random.default_rng([seed, zlib.crc32(stream.encode())])


@dataclass
class TrainConfig:
    hidden_size: int = 64
    attributes: tuple = ("RL", "DA", "MU", "CR", "S")
    su_weight: float = 1.0          # trade-off between NLL and state update loss
    batch_size: int = 32
    clip_norm: float = 5.0
    rho: float = 0.95
    eps: float = 1e-6
    max_epochs: int = 30
    patience: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.su_weight < 0:
            raise ValueError("su_weight must be non-negative")
        if self.batch_size < 1 or self.patience < 1:
            raise ValueError("batch_size and patience must be at least 1")


# -----------------------------------------------------------------------------
# Loss surfaces


def nll_loss(batch, model):
    """Batch-mean negative log likelihood under teacher forcing."""
    return model.forward_teacher(batch, su_weight=0.0).nll


def masked_norm_gap(values, targets, mask):
    """Sum over batch and cells of mask * ||values - targets|| (L2 rows)."""
    norms = ad.l2_norm(values - targets, axis=2)
    return ad.reduce_sum(norms * ad.const(np.asarray(mask, dtype=np.float64)))


def state_update_loss(value_steps, target_steps, masks):
    """Batch-mean of masked per-step cell norms over a recorded trajectory.

    `value_steps[t]` and `target_steps[t]` are (B, l, d) tensors; `masks[t]`
    is (B, l, 1). Trackable variables carry a live mask at every valid word
    step, the others only at each example's last word step.
    """
    if not value_steps:
        raise ValueError("state_update_loss: empty trajectory")
    batch = value_steps[0].shape[0]
    total = None
    for values, targets, mask in zip(value_steps, target_steps, masks):
        term = masked_norm_gap(values, targets, mask)
        total = term if total is None else total + term
    return ad.const(1.0 / batch) * total


def total_loss(batch, model, su_weight):
    """Combined objective; with su_weight 0 this is exactly the NLL."""
    return model.forward_teacher(batch, su_weight=su_weight)


# -----------------------------------------------------------------------------
# Optimizer


def adadelta_state(params):
    return {
        name: (np.zeros_like(t.data), np.zeros_like(t.data))
        for name, t in params.items()
    }


def adadelta_step(params, grads, state, rho=0.95, eps=1e-6, clip_norm=5.0):
    """One Adadelta update over named parameters, in place.

    Gradients are rescaled first when their global L2 norm exceeds
    `clip_norm`. A non-finite gradient aborts the step.
    """
    for name in params:
        if not np.all(np.isfinite(grads[name])):
            raise TrainingError(f"non-finite gradient in {name!r}; step aborted")
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    scale = clip_norm / total if clip_norm is not None and total > clip_norm else 1.0
    for name, tensor in params.items():
        g = grads[name] * scale
        acc_g, acc_dx = state[name]
        acc_g *= rho
        acc_g += (1.0 - rho) * g * g
        step = -np.sqrt(acc_dx + eps) / np.sqrt(acc_g + eps) * g
        acc_dx *= rho
        acc_dx += (1.0 - rho) * step * step
        tensor.data += step
    return params, state


# -----------------------------------------------------------------------------
# Checkpoints


@dataclass
class Checkpoint:
    kind: str
    config: dict
    vocabs: dict
    params: dict
    history: list = field(default_factory=list)
    format_version: int = 1

    def to_json(self):
        payload = {
            "format_version": self.format_version,
            "kind": self.kind,
            "config": self.config,
            "vocabs": self.vocabs,
            "history": self.history,
            "params": {
                name: {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
                for name, arr in self.params.items()
            },
        }
        return json.dumps(payload, sort_keys=True)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        params = {
            name: np.array(spec["data"], dtype=np.float64).reshape(spec["shape"])
            for name, spec in payload["params"].items()
        }
        return cls(
            kind=payload["kind"],
            config=payload["config"],
            vocabs=payload["vocabs"],
            params=params,
            history=payload["history"],
            format_version=payload["format_version"],
        )

    def build_generator(self):
        if self.kind != "generator":
            raise ValueError(f"checkpoint holds a {self.kind!r} model")
        msg_vocab = Vocab.from_dict(self.vocabs["message"])
        rsp_vocab = Vocab.from_dict(self.vocabs["response"])
        schema = default_schema().subset(self.config["attributes"])
        model = Generator(
            msg_vocab, rsp_vocab, schema, self.config["hidden_size"],
            np.random.default_rng(0),
        )
        _load_params(model, self.params)
        return model


def _load_params(model, arrays):
    missing = set(model.params) ^ set(arrays)
    if missing:
        raise ValueError(f"checkpoint parameter mismatch: {sorted(missing)}")
    for name, tensor in model.params.items():
        if tensor.data.shape != arrays[name].shape:
            raise ValueError(f"shape mismatch for {name!r}")
        tensor.data = arrays[name].copy()


def snapshot_params(model):
    return {name: t.data.copy() for name, t in model.params.items()}


# -----------------------------------------------------------------------------
# Annotated datasets and the training loop


def load_annotated(path, schema):
    """Read {"message", "response", "metaword"} JSONL into TrainingExamples."""
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise TrainingError(f"{path}:{lineno}: malformed JSON ({e.msg})") from e
            try:
                metaword = MetaWord.from_dict(obj["metaword"], schema)
            except KeyError as e:
                raise TrainingError(f"{path}:{lineno}: missing field {e.args[0]!r}") from e
            examples.append(
                TrainingExample(
                    tokenize(obj["message"]), tokenize(obj["response"]), metaword
                )
            )
    return examples


def iter_batches(examples, batch_size, rng):
    order = rng.permutation(len(examples))
    for start in range(0, len(order), batch_size):
        yield [examples[i] for i in order[start:start + batch_size]]


def train_generator(
    train_examples, val_examples, msg_vocab, rsp_vocab, stats, config, log_fn=None
):
    """Train a generator with early stopping on validation perplexity.

    Stops once validation perplexity has failed to drop for
    `config.patience` consecutive epochs; the returned checkpoint holds the
    best-perplexity parameters. Fully deterministic given config.seed.
    """
    from .evaluation import perplexity

    if not train_examples or not val_examples:
        raise TrainingError("train_generator: empty train or validation split")
    init_rng = named_rng(config.seed, "init")
    batch_rng = named_rng(config.seed, "batching")
    schema = default_schema().subset(config.attributes)
    model = Generator(msg_vocab, rsp_vocab, schema, config.hidden_size, init_rng)
    opt_state = adadelta_state(model.params)

    best_ppl = float("inf")
    best_params = snapshot_params(model)
    history = []
    stagnant = 0
    for epoch in range(1, config.max_epochs + 1):
        t_start = time.perf_counter()
        epoch_loss = 0.0
        n_batches = 0
        for chunk in iter_batches(train_examples, config.batch_size, batch_rng):
            batch = make_batch(chunk, model, stats)
            model.zero_grads()
            with ad.Tape():
                result = model.forward_teacher(batch, su_weight=config.su_weight)
                ad.backward(result.loss)
            grads = {
                name: t.grad if t.grad is not None else np.zeros_like(t.data)
                for name, t in model.params.items()
            }
            adadelta_step(
                model.params, grads, opt_state,
                rho=config.rho, eps=config.eps, clip_norm=config.clip_norm,
            )
            epoch_loss += result.loss.item()
            n_batches += 1
        val_ppl = perplexity(model, val_examples, stats, batch_size=config.batch_size)
        record = {
            "epoch": epoch,
            "train_loss": epoch_loss / max(n_batches, 1),
            "val_ppl": val_ppl,
        }
        history.append(record)
        if log_fn is not None:
            # timing is reported but kept out of the checkpoint so identical
            # seeds serialize to identical bytes
            log_fn({**record, "seconds": round(time.perf_counter() - t_start, 3)})
        if val_ppl < best_ppl:
            best_ppl = val_ppl
            best_params = snapshot_params(model)
            stagnant = 0
        else:
            stagnant += 1
        if stagnant >= config.patience:
            break

    _load_params(model, best_params)
    checkpoint = Checkpoint(
        kind="generator",
        config={
            "hidden_size": config.hidden_size,
            "attributes": list(config.attributes),
            "su_weight": config.su_weight,
            "seed": config.seed,
        },
        vocabs={
            "message": msg_vocab.to_dict(),
            "response": rsp_vocab.to_dict(),
        },
        params=best_params,
        history=history,
    )
    return checkpoint, model
