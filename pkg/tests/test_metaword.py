import pytest

from metawords.corpus import FreqStats, tokenize
from metawords.metaword import (
    MetaWord,
    MetaWordError,
    default_schema,
    extract_cr,
    extract_da,
    extract_metaword,
    extract_mu,
    extract_rl,
    extract_s,
    make_variable,
    prefix_feature,
)

TABLE_ROWS = [
    ("Is New York more expensive than California?", "8", "yes-no-question", "false"),
    (
        "Cool, sounds great! What is the tallest building in this city, Chrysler building?",
        "17",
        "wh-question",
        "true",
    ),
    # 16 = sixteen tokens once the apostrophe in "don't" splits off:
    # i don ' t know what you are talking about . but it seems good .
    (
        "I don't know what you are talking about. But it seems good.",
        "16",
        "statement",
        "true",
    ),
]


def empty_stats():
    return FreqStats(1, {}, set(), 0)


@pytest.mark.parametrize("text,rl,da,mu", TABLE_ROWS)
def test_golden_rows(text, rl, da, mu):
    toks = tokenize(text)
    assert extract_rl(toks) == rl
    assert extract_da(toks) == da
    assert extract_mu(toks) == mu


def test_rl_clamps_at_25():
    assert extract_rl([f"w{i}" for i in range(30)]) == "25"
    assert extract_rl(["hello"]) == "1"


def test_rl_empty_response_errors():
    with pytest.raises(MetaWordError):
        extract_rl([])


def test_da_short_response_is_other():
    assert extract_da(tokenize("ok.")) == "other"
    assert extract_da(tokenize("fine")) == "other"


def test_mu_drops_short_utterances():
    assert extract_mu(tokenize("ok. fine. yes.")) == "false"


def test_mu_invariant_to_repeated_terminal_punctuation():
    base = tokenize("that was a nice trip. i want to go again.")
    noisy = tokenize("that was a nice trip. i want to go again...!!")
    assert extract_mu(base) == extract_mu(noisy) == "true"


def test_cr_hand_count():
    stats = empty_stats()
    assert extract_cr(["alpha", "beta", "gamma"], ["alpha", "delta"], stats) == 0.5


def test_cr_extremes():
    stats = empty_stats()
    assert extract_cr(["a", "b"], ["c", "d"], stats) == 0.0
    msg = ["alpha", "beta", "gamma"]
    assert extract_cr(msg, list(msg), stats) == 1.0


def test_cr_all_tokens_excluded_gives_zero():
    stats = FreqStats(4, {"the": 4, "a": 3}, {"the", "a"}, 0)
    assert extract_cr(["the", "a"], ["the", "a"], stats) == 0.0


def test_cr_repeated_tokens_counts_distinct_numerator():
    stats = empty_stats()
    # shared distinct = {alpha}, denominator counts both occurrences
    assert extract_cr(["alpha"], ["alpha", "alpha"], stats) == 0.5


def test_s_hand_case():
    stats = FreqStats(10, {"a": 9, "b": 1}, set(), 0)
    assert extract_s(["a", "b"], stats) == pytest.approx(1.0)
    assert extract_s(["a"], stats) == pytest.approx(0.0)


def test_s_degenerate_corpus():
    stats = FreqStats(5, {"only": 5}, set(), 0)
    assert extract_s(["only"], stats) == 0.0
    assert extract_s(["unseen"], stats) == 0.0


def test_s_rarest_word_scores_one():
    stats = FreqStats(20, {"common": 19, "mid": 7, "rare": 1}, set(), 0)
    assert extract_s(["common", "rare"], stats) == pytest.approx(1.0)


def test_extract_metaword_full_schema_table_row_one():
    schema = default_schema()
    stats = FreqStats(10, {"is": 9, "more": 5, "new": 2, "york": 2}, set(), 0)
    msg = tokenize("last week I have a nice trip to New York!")
    rsp = tokenize("Is New York more expensive than California?")
    mw = extract_metaword(msg, rsp, schema, stats)
    assert mw.value("RL") == "8"
    assert mw.value("DA") == "yes-no-question"
    assert mw.value("MU") == "false"
    assert mw.value("CR") > 0.0
    assert 0.0 <= mw.value("S") <= 1.0
    assert [v.key for v in mw] == ["RL", "DA", "MU", "CR", "S"]


def test_extract_metaword_subset_schema():
    schema = default_schema().subset(["RL"])
    mw = extract_metaword(["hi"], ["a", "b", "c"], schema, empty_stats())
    assert len(mw) == 1
    assert mw.value("RL") == "3"
    assert mw.schema_id == "RL"


def test_extract_metaword_empty_response_propagates():
    with pytest.raises(MetaWordError):
        extract_metaword(["hi"], [], default_schema(), empty_stats())


def test_prefix_feature_rl_counts_steps():
    assert prefix_feature("RL", [], ["a", "b", "c"], empty_stats()) == "3"
    long_prefix = [f"w{i}" for i in range(40)]
    assert prefix_feature("RL", [], long_prefix, empty_stats()) == "25"


def test_prefix_feature_matches_full_extraction():
    toks = tokenize("what a fine day it is today")
    assert prefix_feature("RL", [], toks, empty_stats()) == extract_rl(toks)


def test_prefix_feature_cr_and_s():
    stats = FreqStats(10, {"alpha": 2, "beta": 8}, set(), 0)
    assert prefix_feature("CR", ["alpha"], ["beta"], stats) == 0.0
    assert prefix_feature("CR", ["alpha"], ["alpha", "beta"], stats) == 0.5
    assert prefix_feature("S", [], ["alpha"], stats) == pytest.approx(1.0)


def test_prefix_feature_rejects_case_two_variables():
    for key in ("DA", "MU"):
        with pytest.raises(MetaWordError):
            prefix_feature(key, [], ["a", "b", "c"], empty_stats())


def test_extractor_outputs_stay_in_range():
    stats = FreqStats(50, {f"t{i}": i + 1 for i in range(20)}, {"t0"}, 3)
    msg = ["t1", "t5", "t9"]
    for rsp in (["t1"], ["t5", "t5", "t19"], ["t0"], msg * 3):
        assert 0.0 <= extract_cr(msg, rsp, stats) <= 1.0
        assert 0.0 <= extract_s(rsp, stats) <= 1.0


def test_make_variable_validates():
    schema = default_schema()
    with pytest.raises(MetaWordError):
        make_variable(schema.get("CR"), 1.5)
    with pytest.raises(MetaWordError):
        make_variable(schema.get("DA"), "monologue")
    v = make_variable(schema.get("RL"), "8")
    assert v.value == "8"


def test_metaword_dict_roundtrip():
    schema = default_schema()
    mw = MetaWord.from_dict(
        {"RL": "8", "DA": "statement", "MU": "false", "CR": 0.25, "S": 0.5}, schema
    )
    assert MetaWord.from_dict(mw.to_dict(), schema) == mw


def test_schema_meta_tokens_cover_labels_and_categories():
    tokens = default_schema().meta_tokens()
    for expected in ("response", "length", "wh-question", "true", "25", "specificity"):
        assert expected in tokens
