"""Automatic evaluation: relevance, diversity, one-to-many accuracy,
meta-word expression accuracy, and perplexity."""

from __future__ import annotations

import json
import math
from collections import Counter

import numpy as np

from .metaword import MetaWordError, extract_cr, extract_da, extract_mu, extract_rl, extract_s
from .model import make_batch


class EvaluationError(ValueError):
    pass


# -----------------------------------------------------------------------------
# Lexical metrics


def _ngrams(tokens, n):
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def bleu(hypotheses, references, max_order=4, epsilon=1e-9):
    """Corpus BLEU with uniform 1..max_order weights and add-epsilon smoothing.

    Each n-gram precision is (matches + eps) / (candidates + eps), so a
    perfect corpus scores exactly 1.0 and empty match counts stay finite.
    """
    if len(hypotheses) != len(references):
        raise EvaluationError(
            f"bleu: {len(hypotheses)} hypotheses vs {len(references)} references"
        )
    if not hypotheses:
        raise EvaluationError("bleu: empty corpus")
    matches = [0] * max_order
    totals = [0] * max_order
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_order + 1):
            hyp_counts = Counter(_ngrams(hyp, n))
            ref_counts = Counter(_ngrams(ref, n))
            matches[n - 1] += sum(
                min(c, ref_counts[g]) for g, c in hyp_counts.items()
            )
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    log_precision = sum(
        math.log((m + epsilon) / (t + epsilon)) for m, t in zip(matches, totals)
    ) / max_order
    if hyp_len == 0:
        return 0.0
    brevity = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return brevity * math.exp(log_precision)


def distinct_n(responses, n):
    """Distinct n-grams over total n-grams across the response set."""
    if n < 1:
        raise EvaluationError("distinct_n: n must be positive")
    seen = set()
    total = 0
    for tokens in responses:
        grams = _ngrams(tokens, n)
        seen.update(grams)
        total += len(grams)
    return len(seen) / total if total else 0.0


# -----------------------------------------------------------------------------
# Embedding-based metrics


class EmbeddingSource:
    """Token -> vector map with a skip-OOV policy."""

    def __init__(self, vectors, origin):
        self.vectors = dict(vectors)
        self.origin = origin
        dims = {v.shape[0] for v in self.vectors.values()}
        if len(dims) != 1:
            raise EvaluationError("embedding source has inconsistent dimensions")
        self.dim = dims.pop()

    @classmethod
    def from_model(cls, model):
        table = model.params["emb.rsp"].data
        vectors = {
            tok: table[i].copy() for i, tok in enumerate(model.rsp_vocab.id_to_token)
        }
        return cls(vectors, "model-learned")

    @classmethod
    def from_file(cls, path):
        vectors = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                parts = line.split()
                if not parts:
                    continue
                try:
                    vectors[parts[0]] = np.array([float(x) for x in parts[1:]])
                except ValueError as e:
                    raise EvaluationError(f"{path}:{lineno}: bad embedding row") from e
        if not vectors:
            raise EvaluationError(f"{path}: no embedding rows")
        return cls(vectors, "external file")

    def rows(self, tokens):
        return [self.vectors[t] for t in tokens if t in self.vectors]


def _cosine(u, v):
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(u @ v / (nu * nv))


def _extrema_vector(rows):
    stack = np.stack(rows)
    idx = np.abs(stack).argmax(axis=0)
    return stack[idx, np.arange(stack.shape[1])]


def embedding_metrics(hypothesis, reference, source):
    """(average, extrema, greedy) cosine scores, or None if either side is all-OOV."""
    hyp_rows = source.rows(hypothesis)
    ref_rows = source.rows(reference)
    if not hyp_rows or not ref_rows:
        return None
    average = _cosine(np.mean(hyp_rows, axis=0), np.mean(ref_rows, axis=0))
    extrema = _cosine(_extrema_vector(hyp_rows), _extrema_vector(ref_rows))
    forward = np.mean([max(_cosine(h, r) for r in ref_rows) for h in hyp_rows])
    backward = np.mean([max(_cosine(r, h) for h in hyp_rows) for r in ref_rows])
    greedy = float((forward + backward) / 2.0)
    return average, extrema, greedy


def _bow_vectors(sentences, source, extrema):
    out = []
    for tokens in sentences:
        rows = source.rows(tokens)
        if rows:
            out.append(_extrema_vector(rows) if extrema else np.mean(rows, axis=0))
    return out


def abow_ebow(generated, references, source):
    """One-to-many precision/recall with average- and extrema-bow vectors.

    precision: mean over generated sentences of the best cosine against any
    reference; recall swaps the roles.
    """
    if not generated or not references:
        raise EvaluationError("abow_ebow: empty sentence set")
    scores = []
    for extrema in (False, True):
        gen_vecs = _bow_vectors(generated, source, extrema)
        ref_vecs = _bow_vectors(references, source, extrema)
        if not gen_vecs or not ref_vecs:
            raise EvaluationError("abow_ebow: a side is entirely out of vocabulary")
        precision = float(
            np.mean([max(_cosine(g, r) for r in ref_vecs) for g in gen_vecs])
        )
        recall = float(
            np.mean([max(_cosine(r, g) for g in gen_vecs) for r in ref_vecs])
        )
        scores.extend([precision, recall])
    return tuple(scores)


# -----------------------------------------------------------------------------
# Meta-word expression and perplexity


_EXPRESSION_EXTRACTORS = {
    "RL": lambda msg, rsp, stats: extract_rl(rsp),
    "DA": lambda msg, rsp, stats: extract_da(rsp),
    "MU": lambda msg, rsp, stats: extract_mu(rsp),
    "CR": lambda msg, rsp, stats: extract_cr(msg, rsp, stats),
    "S": lambda msg, rsp, stats: extract_s(rsp, stats),
}


def metaword_expression(items, schema, stats):
    """Score how faithfully generated responses express their target meta-words.

    `items` holds (message_tokens, generated_tokens, target MetaWord)
    triples. Categorical variables score accuracy of re-extracted values;
    real variables score mean square deviation. Instances whose extraction
    fails are skipped and counted.
    """
    if not items:
        raise EvaluationError("metaword_expression: empty item list")
    report = {}
    for spec in schema:
        hits = 0.0
        count = 0
        skipped = 0
        for message, generated, target in items:
            try:
                value = _EXPRESSION_EXTRACTORS[spec.key](message, generated, stats)
            except MetaWordError:
                skipped += 1
                continue
            goal = target.value(spec.key)
            if spec.kind == "categorical":
                hits += 1.0 if value == goal else 0.0
            else:
                hits += (float(value) - float(goal)) ** 2
            count += 1
        score = hits / count if count else float("nan")
        report[spec.key] = {
            "kind": spec.kind,
            "metric": "accuracy" if spec.kind == "categorical" else "square_deviation",
            "score": score,
            "count": count,
            "skipped": skipped,
        }
    return report


def perplexity(model, examples, stats, batch_size=64):
    """exp(total teacher-forced NLL / total non-pad prediction steps)."""
    if not examples:
        raise EvaluationError("perplexity: empty dataset")
    total_nll = 0.0
    total_tokens = 0
    for start in range(0, len(examples), batch_size):
        batch = make_batch(examples[start:start + batch_size], model, stats)
        result = model.forward_teacher(batch, su_weight=0.0)
        total_nll += result.token_nll_total.item()
        total_tokens += result.token_count
    return math.exp(total_nll / total_tokens)


# -----------------------------------------------------------------------------
# Reports

REPORT_SECTIONS = ("relevance", "diversity", "one_to_many", "expression", "perplexity")


def validate_report(payload):
    """Check the documented report shape: config/counts plus metric sections."""
    if not isinstance(payload, dict):
        raise EvaluationError("report must be an object")
    for key in ("config", "counts", "metrics"):
        if key not in payload or not isinstance(payload[key], dict):
            raise EvaluationError(f"report missing object field {key!r}")
    for section, values in payload["metrics"].items():
        if section not in REPORT_SECTIONS:
            raise EvaluationError(f"unknown report section {section!r}")
        if not isinstance(values, dict):
            raise EvaluationError(f"section {section!r} must be an object")
    for name, value in payload["counts"].items():
        if not isinstance(value, int):
            raise EvaluationError(f"count {name!r} must be an integer")
    return True


def render_report(payload):
    lines = ["metric".ljust(28) + "value"]
    lines.append("-" * 40)
    for section in REPORT_SECTIONS:
        if section not in payload["metrics"]:
            continue
        for name, value in payload["metrics"][section].items():
            shown = f"{value:.6g}" if isinstance(value, float) else str(value)
            lines.append(f"{section}/{name}".ljust(28) + shown)
    counts = ", ".join(f"{k}={v}" for k, v in payload["counts"].items())
    lines.append("-" * 40)
    lines.append(f"counts: {counts}")
    return "\n".join(lines)


def report_to_json(payload):
    return json.dumps(payload, sort_keys=True, indent=2)
