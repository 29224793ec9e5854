"""Command-line pipeline: prepare, train, train-predictor, generate, trace,
evaluate.

Every command is reproducible from its inputs, flags, and --seed alone; all
randomness flows through named substreams of that one seed. Relative paths
resolve under $METAWORD_DATA_DIR when it is set. A --config file of
key=value lines supplies defaults that explicit flags override. Exit codes:
0 success, 2 usage errors, 1 runtime failures.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import evaluation, inference
from .corpus import (
    Vocab,
    build_vocab,
    default_stopwords,
    load_dataset,
    load_stopwords,
    tokenize,
)
from .corpus import FreqStats
from .metaword import MetaWord, MetaWordError, default_schema, extract_metaword
from .model import TrainingExample
from .predictor import PredictorConfig, predictor_from_checkpoint, train_predictor
from .training import Checkpoint, TrainConfig, load_annotated, named_rng, train_generator

ALL_ATTRIBUTES = "RL,DA,MU,CR,S"


def resolve_path(value):
    path = Path(value)
    root = os.environ.get("METAWORD_DATA_DIR")
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def parse_attributes(text):
    if text.strip().lower() in ("", "none"):
        return ()
    keys = [k.strip().upper() for k in text.split(",") if k.strip()]
    default_schema().subset(keys)  # validates names
    return tuple(keys)


def parse_override(text):
    """Parse "RL=8,DA=yes-no-question,CR=0.2" into a raw override dict."""
    out = {}
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        if "=" not in item:
            raise MetaWordError(f"override entry {item!r} is not key=value")
        key, value = item.split("=", 1)
        out[key.strip().upper()] = value.strip()
    if not out:
        raise MetaWordError("override string holds no variables")
    return out


def apply_config_file(parser, argv):
    """Load key=value defaults from --config before the real parse."""
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config")
    known, _ = probe.parse_known_args(argv)
    if not known.config:
        return
    defaults = {}
    path = resolve_path(known.config)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            defaults[key.strip().replace("-", "_")] = value.strip()
    parser.set_defaults(**defaults)


# -----------------------------------------------------------------------------
# prepare


def cmd_prepare(args):
    in_path = resolve_path(args.input)
    out_dir = resolve_path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cap = args.per_message_cap if args.per_message_cap > 0 else None
    pairs, stats_load = load_dataset(in_path, max_tokens=args.max_len, per_message_cap=cap)
    if not pairs:
        raise ValueError("no pairs survived ingestion")
    if args.stopwords == "default":
        stopwords = default_stopwords()
    elif args.stopwords == "none":
        stopwords = set()
    else:
        stopwords = load_stopwords(resolve_path(args.stopwords))
    msg_vocab, rsp_vocab, stats = build_vocab(
        pairs, max_size=args.max_vocab, stopwords=stopwords, top_k=args.top_k
    )
    schema = default_schema().subset(parse_attributes(args.attributes))
    annotated = out_dir / "annotated.jsonl"
    with open(annotated, "w", encoding="utf-8") as fh:
        for pair in pairs:
            msg, rsp = tokenize(pair.message), tokenize(pair.response)
            metaword = extract_metaword(msg, rsp, schema, stats)
            fh.write(json.dumps({
                "message": pair.message,
                "response": pair.response,
                "metaword": metaword.to_dict(),
            }, sort_keys=True) + "\n")
    (out_dir / "msg_vocab.json").write_text(json.dumps(msg_vocab.to_dict(), sort_keys=True))
    (out_dir / "rsp_vocab.json").write_text(json.dumps(rsp_vocab.to_dict(), sort_keys=True))
    (out_dir / "freq_stats.json").write_text(json.dumps(stats.to_dict(), sort_keys=True))
    (out_dir / "schema.json").write_text(json.dumps({"attributes": list(schema.keys)}))
    print(
        f"prepared {stats_load.kept} pairs "
        f"(dropped {stats_load.dropped_long} over-length, "
        f"{stats_load.dropped_over_cap} over per-message cap) -> {out_dir}"
    )
    return 0


def load_prepared(data_dir, attributes=None):
    data_dir = resolve_path(data_dir)
    msg_vocab = Vocab.from_dict(json.loads((data_dir / "msg_vocab.json").read_text()))
    rsp_vocab = Vocab.from_dict(json.loads((data_dir / "rsp_vocab.json").read_text()))
    stats = FreqStats.from_dict(json.loads((data_dir / "freq_stats.json").read_text()))
    prepared_keys = json.loads((data_dir / "schema.json").read_text())["attributes"]
    keys = list(attributes) if attributes is not None else prepared_keys
    for key in keys:
        if key not in prepared_keys:
            raise ValueError(f"attribute {key!r} was not annotated in {data_dir}")
    schema = default_schema().subset(keys)
    examples = load_annotated(data_dir / "annotated.jsonl", schema)
    return examples, msg_vocab, rsp_vocab, stats, schema


def split_examples(examples, val_fraction, seed):
    order = named_rng(seed, "split").permutation(len(examples))
    n_val = max(1, int(round(len(examples) * val_fraction)))
    val_idx = set(order[:n_val].tolist())
    train = [examples[i] for i in range(len(examples)) if i not in val_idx]
    val = [examples[i] for i in sorted(val_idx)]
    return train, val


# -----------------------------------------------------------------------------
# train / train-predictor


def _epoch_logger(log_path):
    if log_path is None:
        return lambda record: print(json.dumps(record, sort_keys=True))
    fh = open(resolve_path(log_path), "w", encoding="utf-8")

    def log(record):
        fh.write(json.dumps(record, sort_keys=True) + "\n")
        fh.flush()

    return log


def cmd_train(args):
    attributes = parse_attributes(args.attributes) if args.attributes is not None else None
    examples, msg_vocab, rsp_vocab, stats, schema = load_prepared(args.data, attributes)
    train, val = split_examples(examples, args.val_fraction, args.seed)
    config = TrainConfig(
        hidden_size=args.hidden_size,
        attributes=tuple(schema.keys),
        su_weight=args.su_weight,
        batch_size=args.batch_size,
        max_epochs=args.epochs,
        patience=args.patience,
        seed=args.seed,
    )
    checkpoint, _ = train_generator(
        train, val, msg_vocab, rsp_vocab, stats, config, log_fn=_epoch_logger(args.log)
    )
    out = resolve_path(args.out)
    checkpoint.save(out)
    best = min(h["val_ppl"] for h in checkpoint.history)
    print(f"saved generator to {out} (best val ppl {best:.4f}, "
          f"{len(checkpoint.history)} epochs)")
    return 0


def cmd_train_predictor(args):
    attributes = parse_attributes(args.attributes) if args.attributes is not None else None
    examples, msg_vocab, _, _, schema = load_prepared(args.data, attributes)
    train, val = split_examples(examples, args.val_fraction, args.seed)
    config = PredictorConfig(
        hidden_size=args.hidden_size,
        attributes=tuple(schema.keys),
        entropy_weight=args.entropy_weight,
        batch_size=args.batch_size,
        max_epochs=args.epochs,
        patience=args.patience,
        seed=args.seed,
    )
    checkpoint, _ = train_predictor(
        train, val, msg_vocab, config, log_fn=_epoch_logger(args.log)
    )
    out = resolve_path(args.out)
    checkpoint.save(out)
    print(f"saved predictor to {out} ({len(checkpoint.history)} epochs)")
    return 0


# -----------------------------------------------------------------------------
# generate / trace


def _read_messages(args):
    if args.message is not None:
        return [args.message]
    if args.input is None:
        raise ValueError("provide --message or --input")
    messages = []
    with open(resolve_path(args.input), encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                messages.append(json.loads(line)["message"])
    return messages


def cmd_generate(args):
    model = Checkpoint.load(resolve_path(args.model)).build_generator()
    predictor = None
    if args.predictor:
        predictor = predictor_from_checkpoint(Checkpoint.load(resolve_path(args.predictor)))
    override = parse_override(args.override) if args.override else None
    out_fh = open(resolve_path(args.out), "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for message in _read_messages(args):
            rows = inference.generate(
                model, message, override=override, n=args.n, predictor=predictor,
                seed=args.seed, beam_size=args.beam, max_len=args.max_len,
            )
            for row in rows:
                out_fh.write(json.dumps(row, sort_keys=True) + "\n")
    finally:
        if out_fh is not sys.stdout:
            out_fh.close()
    return 0


def cmd_trace(args):
    model = Checkpoint.load(resolve_path(args.model)).build_generator()
    predictor = None
    if args.predictor:
        predictor = predictor_from_checkpoint(Checkpoint.load(resolve_path(args.predictor)))
    override = parse_override(args.override) if args.override else None
    tokens = tokenize(args.message)
    metaword = inference.resolve_metaword(
        model.schema, override, predictor,
        predictor.msg_vocab.encode(tokens) if predictor else None,
        named_rng(args.seed, "sampling"),
    )
    response, records = inference.trace_decode(model, args.message, metaword, args.max_len)
    csv_text = inference.trace_to_csv(records, model.schema.keys)
    if args.out:
        resolve_path(args.out).write_text(csv_text)
    else:
        sys.stdout.write(csv_text)
    print(f"# response: {' '.join(response)}", file=sys.stderr)
    return 0


# -----------------------------------------------------------------------------
# evaluate


def _read_jsonl(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    return rows


def cmd_evaluate(args):
    generated_rows = _read_jsonl(resolve_path(args.generated))
    reference_rows = _read_jsonl(resolve_path(args.reference))
    if not generated_rows or not reference_rows:
        raise ValueError("empty generated or reference file")

    gen_by_msg = {}
    for row in generated_rows:
        gen_by_msg.setdefault(row["message"], []).append(row)
    ref_by_msg = {}
    for row in reference_rows:
        ref_by_msg.setdefault(row["message"], []).append(row["response"])
    if set(gen_by_msg) != set(ref_by_msg):
        raise ValueError(
            "alignment mismatch: generated and reference files cover different messages"
        )
    messages = [m for m in ref_by_msg if m in gen_by_msg]

    model = Checkpoint.load(resolve_path(args.model)).build_generator() if args.model else None
    stats = schema = None
    if args.data:
        _, _, _, stats, schema = load_prepared(args.data)

    top1 = {m: tokenize(gen_by_msg[m][0]["response"]) for m in messages}
    first_ref = {m: tokenize(ref_by_msg[m][0]) for m in messages}

    metrics = {"relevance": {}, "diversity": {}}
    counts = {"messages": len(messages), "generated_rows": len(generated_rows)}

    metrics["relevance"]["bleu"] = evaluation.bleu(
        [top1[m] for m in messages], [first_ref[m] for m in messages]
    )
    if model is not None:
        source = evaluation.EmbeddingSource.from_model(model)
        sums = np.zeros(3)
        used = 0
        for m in messages:
            scores = evaluation.embedding_metrics(top1[m], first_ref[m], source)
            if scores is not None:
                sums += scores
                used += 1
        counts["embedding_skipped"] = len(messages) - used
        if used:
            avg = sums / used
            metrics["relevance"]["embedding_average"] = float(avg[0])
            metrics["relevance"]["embedding_extrema"] = float(avg[1])
            metrics["relevance"]["embedding_greedy"] = float(avg[2])

    metrics["diversity"]["distinct_1"] = evaluation.distinct_n(list(top1.values()), 1)
    metrics["diversity"]["distinct_2"] = evaluation.distinct_n(list(top1.values()), 2)

    multi_ref = [m for m in messages if len(ref_by_msg[m]) >= 2]
    if multi_ref and model is not None:
        source = evaluation.EmbeddingSource.from_model(model)
        sums = np.zeros(4)
        for m in multi_ref:
            gen_set = [tokenize(r["response"]) for r in gen_by_msg[m]]
            ref_set = [tokenize(r) for r in ref_by_msg[m]]
            sums += evaluation.abow_ebow(gen_set, ref_set, source)
        avg = sums / len(multi_ref)
        metrics["one_to_many"] = {
            "a_precision": float(avg[0]),
            "a_recall": float(avg[1]),
            "e_precision": float(avg[2]),
            "e_recall": float(avg[3]),
        }
        counts["multi_reference_messages"] = len(multi_ref)

    has_metawords = all("metaword" in r for r in generated_rows)
    if stats is not None and has_metawords:
        items = []
        for row in generated_rows:
            items.append((
                tokenize(row["message"]),
                tokenize(row["response"]),
                MetaWord.from_dict(row["metaword"], schema),
            ))
        expression = evaluation.metaword_expression(items, schema, stats)
        metrics["expression"] = {
            f"{key}_{info['metric']}": info["score"] for key, info in expression.items()
        }
        counts["expression_skipped"] = sum(i["skipped"] for i in expression.values())

    if model is not None and stats is not None:
        examples = [
            TrainingExample(
                tokenize(m), tokenize(ref_by_msg[m][0]),
                extract_metaword(tokenize(m), tokenize(ref_by_msg[m][0]), schema, stats),
            )
            for m in messages
        ]
        metrics["perplexity"] = {
            "reference_ppl": evaluation.perplexity(model, examples, stats)
        }

    payload = {
        "config": {
            "bleu_order": 4,
            "embedding_source": "model-learned" if model is not None else "none",
        },
        "counts": counts,
        "metrics": metrics,
    }
    evaluation.validate_report(payload)
    print(evaluation.render_report(payload))
    if args.out:
        resolve_path(args.out).write_text(evaluation.report_to_json(payload))
    return 0


# -----------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="metawords",
        description="Meta-word conditioned response generation pipeline",
    )
    parser.add_argument("--config", help="key=value defaults file")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="annotate a raw message/response JSONL corpus")
    p.add_argument("--input", required=True, help="raw JSONL with message/response")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--attributes", default=ALL_ATTRIBUTES)
    p.add_argument("--max-len", type=int, default=30, help="token cap per side")
    p.add_argument("--max-vocab", type=int, default=2000)
    p.add_argument("--top-k", type=int, default=1000,
                   help="frequent-word exclusion size for copy ratio")
    p.add_argument("--stopwords", default="default", help="default | none | path")
    p.add_argument("--per-message-cap", type=int, default=0, help="0 disables")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train the response generator")
    p.add_argument("--data", required=True, help="directory from prepare")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="epoch log JSONL path")
    p.add_argument("--attributes", default=None, help="subset of annotated attributes")
    p.add_argument("--hidden-size", type=int, default=64)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--su-weight", type=float, default=1.0)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--patience", type=int, default=2)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-predictor", help="train the meta-word predictor")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.add_argument("--attributes", default=None)
    p.add_argument("--hidden-size", type=int, default=32)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--entropy-weight", type=float, default=0.01)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--patience", type=int, default=2)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_predictor)

    p = sub.add_parser("generate", help="decode responses for messages")
    p.add_argument("--model", required=True)
    p.add_argument("--predictor", help="needed unless --override covers all attributes")
    p.add_argument("--message", help="single message text")
    p.add_argument("--input", help="JSONL with a message field per line")
    p.add_argument("--override", help='e.g. "RL=8,DA=yes-no-question,MU=false"')
    p.add_argument("--n", type=int, default=1, help="meta-word draws per message")
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--max-len", type=int, default=26)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output JSONL (default stdout)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("trace", help="greedy decode with goal-distance trace CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--predictor")
    p.add_argument("--message", required=True)
    p.add_argument("--override")
    p.add_argument("--max-len", type=int, default=26)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("evaluate", help="score generated responses against references")
    p.add_argument("--generated", required=True, help="JSONL from generate")
    p.add_argument("--reference", required=True, help="JSONL with message/response")
    p.add_argument("--model", help="generator checkpoint for embeddings and ppl")
    p.add_argument("--data", help="prepare directory for stats-based metrics")
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(func=cmd_evaluate)

    return parser


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit:
        raise
    except Exception as e:  # noqa: BLE001 - single CLI boundary
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
