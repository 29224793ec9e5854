import json

import pytest

from metawords.cli import main, parse_override
from metawords.metaword import MetaWordError
from metawords.synthetic import SYNTHETIC_TOP_K, make_pairs


def write_raw(path, pairs):
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(json.dumps({"message": p.message, "response": p.response}) + "\n")


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Tiny end-to-end run shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    raw = root / "raw.jsonl"
    write_raw(raw, make_pairs(60, seed=77))
    data_dir = root / "prepared"
    assert main([
        "prepare", "--input", str(raw), "--out-dir", str(data_dir),
        "--top-k", str(SYNTHETIC_TOP_K), "--max-vocab", "400",
    ]) == 0
    model_path = root / "gen.json"
    assert main([
        "train", "--data", str(data_dir), "--out", str(model_path),
        "--hidden-size", "8", "--batch-size", "16", "--epochs", "2",
        "--patience", "5", "--seed", "11", "--log", str(root / "train.log.jsonl"),
    ]) == 0
    predictor_path = root / "pred.json"
    assert main([
        "train-predictor", "--data", str(data_dir), "--out", str(predictor_path),
        "--hidden-size", "8", "--batch-size", "16", "--epochs", "2",
        "--patience", "5", "--seed", "11",
    ]) == 0
    return root, raw, data_dir, model_path, predictor_path


FULL_OVERRIDE = "RL=5,DA=statement,MU=false,CR=0.5,S=0.3"


def test_parse_override():
    parsed = parse_override("RL=8,da=yes-no-question")
    assert parsed == {"RL": "8", "DA": "yes-no-question"}
    with pytest.raises(MetaWordError):
        parse_override("RL8")


def test_prepare_outputs_and_determinism(pipeline, tmp_path):
    root, raw, data_dir, _, _ = pipeline
    for name in ("annotated.jsonl", "msg_vocab.json", "rsp_vocab.json",
                 "freq_stats.json", "schema.json"):
        assert (data_dir / name).exists()
    first_row = json.loads((data_dir / "annotated.jsonl").read_text().splitlines()[0])
    assert set(first_row["metaword"]) == {"RL", "DA", "MU", "CR", "S"}
    rerun = tmp_path / "again"
    assert main([
        "prepare", "--input", str(raw), "--out-dir", str(rerun),
        "--top-k", str(SYNTHETIC_TOP_K), "--max-vocab", "400",
    ]) == 0
    assert (rerun / "annotated.jsonl").read_bytes() == (data_dir / "annotated.jsonl").read_bytes()


def test_prepare_drops_long_pairs(tmp_path, capsys):
    raw = tmp_path / "raw.jsonl"
    rows = [
        {"message": "hi there friend", "response": "all good here ."},
        {"message": "hi", "response": " ".join(f"w{i}" for i in range(31))},
    ]
    raw.write_text("\n".join(json.dumps(r) for r in rows))
    assert main(["prepare", "--input", str(raw), "--out-dir", str(tmp_path / "out"),
                 "--top-k", "0"]) == 0
    out = capsys.readouterr().out
    assert "prepared 1 pairs" in out
    assert "dropped 1 over-length" in out


def test_prepare_attribute_subset(tmp_path):
    raw = tmp_path / "raw.jsonl"
    write_raw(raw, make_pairs(10, seed=3))
    out_dir = tmp_path / "out"
    assert main(["prepare", "--input", str(raw), "--out-dir", str(out_dir),
                 "--attributes", "RL", "--top-k", "0"]) == 0
    row = json.loads((out_dir / "annotated.jsonl").read_text().splitlines()[0])
    assert set(row["metaword"]) == {"RL"}


def test_train_single_attribute_model(pipeline, tmp_path):
    _, _, data_dir, _, _ = pipeline
    out = tmp_path / "rl只.json"
    assert main([
        "train", "--data", str(data_dir), "--out", str(out),
        "--attributes", "RL", "--hidden-size", "8", "--batch-size", "16",
        "--epochs", "1", "--patience", "5", "--seed", "0",
    ]) == 0
    ckpt = json.loads(out.read_text())
    assert ckpt["config"]["attributes"] == ["RL"]


def test_train_determinism_across_runs(pipeline, tmp_path):
    _, _, data_dir, _, _ = pipeline
    outs = []
    for name in ("a.json", "b.json"):
        out = tmp_path / name
        assert main([
            "train", "--data", str(data_dir), "--out", str(out),
            "--hidden-size", "8", "--batch-size", "16", "--epochs", "1",
            "--patience", "5", "--seed", "7",
        ]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_train_missing_data_dir_fails(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "nope"), "--out",
                 str(tmp_path / "x.json")]) == 1
    assert "error:" in capsys.readouterr().err


def test_generate_with_override(pipeline, capsys):
    _, _, _, model_path, _ = pipeline
    assert main([
        "generate", "--model", str(model_path), "--message", "c01 c02 c03 c04 c05",
        "--override", FULL_OVERRIDE, "--n", "2", "--seed", "5",
    ]) == 0
    rows = [json.loads(l) for l in capsys.readouterr().out.strip().splitlines()]
    assert len(rows) == 2
    assert rows[0]["metaword"]["RL"] == "5"
    assert {"message", "metaword", "response", "log_prob"} <= set(rows[0])


def test_generate_sampling_reproducible(pipeline, tmp_path):
    _, _, _, model_path, predictor_path = pipeline
    outs = []
    for name in ("g1.jsonl", "g2.jsonl"):
        out = tmp_path / name
        assert main([
            "generate", "--model", str(model_path), "--predictor", str(predictor_path),
            "--message", "c01 c02 c03 c04 c05", "--n", "10", "--seed", "9",
            "--out", str(out),
        ]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    assert len(outs[0].splitlines()) == 10


def test_generate_rejects_out_of_range_override(pipeline, capsys):
    _, _, _, model_path, _ = pipeline
    assert main([
        "generate", "--model", str(model_path), "--message", "c01 c02",
        "--override", "RL=5,DA=statement,MU=false,CR=1.5,S=0.3",
    ]) == 1
    assert "CR" in capsys.readouterr().err


def test_generate_partial_override_needs_predictor(pipeline, capsys):
    _, _, _, model_path, _ = pipeline
    assert main([
        "generate", "--model", str(model_path), "--message", "c01 c02",
        "--override", "RL=5",
    ]) == 1
    err = capsys.readouterr().err
    assert "predictor" in err


def test_trace_outputs_csv(pipeline, tmp_path):
    _, _, _, model_path, _ = pipeline
    out = tmp_path / "trace.csv"
    assert main([
        "trace", "--model", str(model_path), "--message", "c01 c02 c03 c04 c05",
        "--override", FULL_OVERRIDE, "--out", str(out),
    ]) == 0
    lines = out.read_text().strip().splitlines()
    assert lines[0].startswith("step,token,dist_RL,dist_DA")
    assert len(lines) >= 1


def test_evaluate_identical_files_scores_bleu_one(pipeline, tmp_path, capsys):
    _, _, data_dir, model_path, _ = pipeline
    reference = tmp_path / "ref.jsonl"
    generated = tmp_path / "gen.jsonl"
    pairs = make_pairs(8, seed=5)
    write_raw(reference, pairs)
    annotated = [json.loads(l) for l in (data_dir / "annotated.jsonl").read_text().splitlines()]
    with open(generated, "w", encoding="utf-8") as fh:
        for p in pairs:
            mw = annotated[0]["metaword"]
            fh.write(json.dumps({
                "message": p.message, "response": p.response,
                "metaword": mw, "log_prob": -1.0,
            }) + "\n")
    report_path = tmp_path / "report.json"
    assert main([
        "evaluate", "--generated", str(generated), "--reference", str(reference),
        "--model", str(model_path), "--data", str(data_dir), "--out", str(report_path),
    ]) == 0
    report = json.loads(report_path.read_text())
    assert report["metrics"]["relevance"]["bleu"] == 1.0
    assert "distinct_1" in report["metrics"]["diversity"]
    assert "reference_ppl" in report["metrics"]["perplexity"]
    out = capsys.readouterr().out
    assert "relevance/bleu" in out


def test_evaluate_multi_reference_enables_one_to_many(pipeline, tmp_path):
    _, _, data_dir, model_path, _ = pipeline
    reference = tmp_path / "ref.jsonl"
    generated = tmp_path / "gen.jsonl"
    rows = [
        {"message": "c01 c02 c03 c04 c05", "response": "c01 f0 f1 ."},
        {"message": "c01 c02 c03 c04 c05", "response": "c02 f2 f3 f4 ."},
    ]
    reference.write_text("\n".join(json.dumps(r) for r in rows))
    gen_rows = [
        {"message": "c01 c02 c03 c04 c05", "response": "c01 f0 f2 ."},
        {"message": "c01 c02 c03 c04 c05", "response": "f0 f1 f2 f3 ."},
    ]
    generated.write_text("\n".join(json.dumps(r) for r in gen_rows))
    report_path = tmp_path / "report.json"
    assert main([
        "evaluate", "--generated", str(generated), "--reference", str(reference),
        "--model", str(model_path), "--out", str(report_path),
    ]) == 0
    report = json.loads(report_path.read_text())
    assert "one_to_many" in report["metrics"]
    for value in report["metrics"]["one_to_many"].values():
        assert -1.0 <= value <= 1.0


def test_evaluate_alignment_mismatch_fails(pipeline, tmp_path, capsys):
    _, _, _, model_path, _ = pipeline
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    a.write_text(json.dumps({"message": "x", "response": "y"}) + "\n")
    b.write_text(json.dumps({"message": "z", "response": "y"}) + "\n")
    assert main(["evaluate", "--generated", str(a), "--reference", str(b)]) == 1
    assert "alignment" in capsys.readouterr().err


def test_usage_error_exits_two():
    with pytest.raises(SystemExit) as exc:
        main(["train"])  # missing required flags
    assert exc.value.code == 2


def test_env_var_data_root(tmp_path, monkeypatch, capsys):
    raw = tmp_path / "raw.jsonl"
    write_raw(raw, make_pairs(6, seed=1))
    monkeypatch.setenv("METAWORD_DATA_DIR", str(tmp_path))
    assert main(["prepare", "--input", "raw.jsonl", "--out-dir", "prepped",
                 "--top-k", "0"]) == 0
    assert (tmp_path / "prepped" / "annotated.jsonl").exists()


def test_config_file_defaults_and_flag_override(tmp_path, capsys):
    raw = tmp_path / "raw.jsonl"
    write_raw(raw, make_pairs(6, seed=2))
    config = tmp_path / "run.cfg"
    config.write_text("top_k=0\nmax_vocab=300\n")
    out_dir = tmp_path / "out"
    assert main(["--config", str(config), "prepare", "--input", str(raw),
                 "--out-dir", str(out_dir)]) == 0
    stats = json.loads((out_dir / "freq_stats.json").read_text())
    assert stats["top_k"] == 0