import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nl2code.data import (ANNOTATED, MINED, Batch, Corpus, CorpusFormatError, EncodedExample,
                          Example, RegimeBatchSource, RegimeConfig, SampleStream, Vocabs,
                          effective_intent, encode_corpus, load_annotated, load_mined,
                          make_batches, regime_batch_source)
from nl2code.tokenizer import BOS, EOS, PAD, train_vocab

from conftest import ANNOTATED_MINI, MINED_MINI


@pytest.fixture(scope="module")
def corpora():
    return load_annotated(ANNOTATED_MINI), load_mined(MINED_MINI)


@pytest.fixture(scope="module")
def vocabs(corpora):
    ann, mined = corpora
    ex = list(ann) + list(mined)
    return Vocabs(train_vocab([effective_intent(e) for e in ex], 500),
                  train_vocab([e.snippet for e in ex], 500))


def rows(n, source, offset=0):
    return [EncodedExample((BOS, 4 + (i + offset) % 50, EOS), (BOS, 5, EOS), source)
            for i in range(n)]


class TestLoading:
    def test_table_one_record(self, corpora):
        ex = corpora[0].examples[0]
        assert ex.intent == "How to trim whitespace?"
        assert ex.rewritten_intent == "trim whitespace in string `s`"
        assert ex.snippet == "s.strip()" and ex.source == ANNOTATED
        assert effective_intent(ex) == "trim whitespace in string `s`"

    def test_mined_record(self, corpora):
        ex = corpora[1].examples[0]
        assert (ex.intent, ex.snippet) == ("Convert a string to an integer", "int('23')")
        assert ex.source == MINED and ex.rewritten_intent is None
        assert effective_intent(ex) == ex.intent

    def test_fixture_sizes(self, corpora):
        assert len(corpora[0]) == 32 and len(corpora[1]) == 128

    def test_null_rewritten_intent_falls_back(self, tmp_path):
        p = tmp_path / "a.json"
        p.write_text(json.dumps([{"intent": "x", "rewritten_intent": None, "snippet": "y",
                                  "question_id": 1}]))
        ex = load_annotated(p).examples[0]
        assert ex.rewritten_intent is None and effective_intent(ex) == "x"

    def test_empty_array(self, tmp_path):
        p = tmp_path / "a.json"
        p.write_text("[]")
        assert len(load_annotated(p)) == 0

    def test_missing_snippet_names_record_and_field(self, tmp_path):
        p = tmp_path / "a.json"
        p.write_text(json.dumps([{"intent": "a", "snippet": "b"}, {"intent": "c"}]))
        with pytest.raises(CorpusFormatError, match=r"record 1 .*'snippet'"):
            load_annotated(p)

    def test_wrong_type_rejected(self, tmp_path):
        p = tmp_path / "a.json"
        p.write_text(json.dumps([{"intent": "a", "snippet": "b", "question_id": "7"}]))
        with pytest.raises(CorpusFormatError, match="question_id"):
            load_annotated(p)

    def test_mined_limits(self):
        assert len(load_mined(MINED_MINI, limit=0)) == 0
        assert len(load_mined(MINED_MINI, limit=100000)) == 128
        first = load_mined(MINED_MINI, limit=5)
        assert [e.snippet for e in first] == [e.snippet for e in load_mined(MINED_MINI)][:5]

    def test_mined_shuffle_before_limit(self):
        a = load_mined(MINED_MINI, limit=10, shuffle_seed=3)
        b = load_mined(MINED_MINI, limit=10, shuffle_seed=3)
        assert a.examples == b.examples
        assert a.examples != load_mined(MINED_MINI, limit=10).examples

    def test_mined_bad_json_line(self, tmp_path):
        p = tmp_path / "m.jsonl"
        p.write_text('{"intent": "a", "snippet": "b"}\n{not json\n')
        with pytest.raises(CorpusFormatError, match="record 1"):
            load_mined(p)

    def test_test_split_is_annotated_only(self):
        with pytest.raises(ValueError):
            Corpus([Example("a", "b", MINED)], "test")


class TestBatching:
    def test_ingestion_is_lossless(self, corpora, vocabs):
        enc, cut = encode_corpus(corpora[0], vocabs)
        assert cut == 0
        for e, r in zip(corpora[0], enc):
            assert r.tgt[0] == BOS and r.tgt[-1] == EOS
            assert vocabs.snippet.decode(r.tgt) == e.snippet

    @pytest.mark.parametrize("n,sizes", [(64, [32, 32]), (65, [32, 32, 1])])
    def test_batch_counts(self, vocabs, n, sizes):
        ex = [Example(f"do thing {i}", f"f({i})") for i in range(n)]
        assert [len(b) for b in make_batches(ex, vocabs, 32)] == sizes

    def test_padding_and_masks(self, corpora, vocabs):
        b = next(make_batches(corpora[0], vocabs, 8))
        assert b.src.shape[0] == 8 and b.src_mask.dtype == bool
        lengths = b.src_mask.sum(1)
        assert lengths.max() == b.src.shape[1]
        assert (b.src[~b.src_mask] == PAD).all()

    def test_same_seed_same_order(self, corpora, vocabs):
        a = [b.src for b in make_batches(corpora[0], vocabs, 8, shuffle_seed=5, epoch=2)]
        b = [b.src for b in make_batches(corpora[0], vocabs, 8, shuffle_seed=5, epoch=2)]
        assert all((x == y).all() for x, y in zip(a, b))
        c = [b.src for b in make_batches(corpora[0], vocabs, 8, shuffle_seed=5, epoch=3)]
        assert not all(x.shape == y.shape and (x == y).all() for x, y in zip(a, c))

    def test_truncation_is_counted(self, vocabs, caplog):
        long = Example("x " * 200, "y" * 300)
        with caplog.at_level(logging.INFO):
            enc, cut = encode_corpus([long], vocabs, max_len=16)
        assert cut == 1 and len(enc[0].src) == 16 and enc[0].src[-1] == EOS
        assert "truncated 1" in caplog.text


class TestRegimes:
    def test_sample_is_half_and_half(self):
        src = RegimeBatchSource(RegimeConfig("sample", alpha=0.3), rows(40, ANNOTATED),
                                rows(90, MINED), batch_size=32)
        for step in (1, 2, 7):
            b, w = src.batch(step)
            assert b.sources.count(ANNOTATED) == 16 and b.sources.count(MINED) == 16
            np.testing.assert_array_equal(w, [1.0] * 16 + [0.3] * 16)

    def test_sample_alpha_one_is_unweighted(self):
        _, w = regime_batch_source(RegimeConfig("sample", alpha=1.0), rows(5, ANNOTATED),
                                   rows(5, MINED), step=3, batch_size=8)
        np.testing.assert_array_equal(w, 1.0)

    def test_finetune_switches_after_pretraining(self):
        cfg = RegimeConfig("finetune", pretrain_steps=10)
        src = RegimeBatchSource(cfg, rows(20, ANNOTATED), rows(50, MINED), batch_size=8)
        assert set(src.batch(10)[0].sources) == {MINED}
        assert set(src.batch(11)[0].sources) == {ANNOTATED}

    def test_mix_proportion_matches_pool(self):
        na, nm = 2379, 100000
        src = RegimeBatchSource(RegimeConfig("mix"), rows(na, ANNOTATED), rows(nm, MINED),
                                batch_size=32)
        frac = np.mean([s == MINED for step in range(1, 301) for s in src.batch(step)[0].sources])
        assert frac == pytest.approx(nm / (na + nm), abs=0.01)  # 0.977

    def test_empty_phase_corpus_raises(self):
        src = RegimeBatchSource(RegimeConfig("finetune", pretrain_steps=5), rows(4, ANNOTATED),
                                [], batch_size=4)
        with pytest.raises(ValueError, match="empty"):
            src.batch(1)

    def test_batches_replay_from_seed(self):
        make = lambda: RegimeBatchSource(RegimeConfig("sample"), rows(30, ANNOTATED),
                                         rows(70, MINED), batch_size=10, seed=4)
        a, b = make(), make()
        for step in (5, 1, 33):
            assert (a.batch(step)[0].src == b.batch(step)[0].src).all()

    def test_invalid_regime(self):
        with pytest.raises(ValueError):
            RegimeConfig("curriculum")


class TestProperties:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 64), st.integers(1, 50), st.integers(1, 50), st.integers(1, 200))
    def test_sample_always_ceil_half_annotated(self, B, na, nm, step):
        src = RegimeBatchSource(RegimeConfig("sample"), rows(na, ANNOTATED), rows(nm, MINED),
                                batch_size=B)
        b, _ = src.batch(step)
        assert len(b) == B and b.sources.count(ANNOTATED) == (B + 1) // 2

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 30), st.integers(0, 500), st.integers(1, 40))
    def test_stream_epoch_is_permutation(self, n, start, seed):
        pool = rows(n, MINED)
        s = SampleStream(pool, seed)
        epoch = start // n
        chunk = s.take(epoch * n, n)
        assert sorted(r.src for r in chunk) == sorted(r.src for r in pool)
        assert s.take(start, 3) == SampleStream(pool, seed).take(start, 3)

    def test_batch_swap_and_select(self):
        b = Batch.collate(rows(3, MINED))
        s = b.swapped()
        assert (s.src == b.tgt).all() and (s.tgt == b.src).all()
        assert len(b.select([0, 2])) == 2
