import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cemb.batching import ALLPALLN, LABELS, LabeledPair, build_groups
from cemb.data import (SynthSpec, gen_synth, load_manifest, load_nli, load_probe_jsonl, load_sts, write_nli,
                       write_probe_jsonl, write_sts)
from cemb.errors import DataError, ParameterError, UsageError
from cemb.evaluation import ProbeTask, StsPair

text = st.text(st.characters(blacklist_categories=("Cs",), blacklist_characters="\t\r\n"), min_size=1,
               max_size=30).filter(lambda s: s.strip())


class TestNli:
    def test_three_lines(self, tmp_path):
        path = tmp_path / "nli.jsonl"
        recs = [("p1", "h1", "entailment"), ("p1", "h2", "neutral"), ("p2", "h3", "contradiction")]
        path.write_text("".join(json.dumps(dict(zip(["premise", "hypothesis", "label"], r))) + "\n"
                                for r in recs), encoding="utf-8")
        assert load_nli(path) == [LabeledPair(*r) for r in recs]

    def test_unknown_label_names_line(self, tmp_path):
        path = tmp_path / "nli.jsonl"
        path.write_text('{"premise": "a", "hypothesis": "b", "label": "neutral"}\n'
                        '{"premise": "a", "hypothesis": "c", "label": "maybe"}\n', encoding="utf-8")
        with pytest.raises(DataError, match=r"nli.jsonl:2: .*maybe"):
            load_nli(path)

    @pytest.mark.parametrize("line", ['{"premise": "a"', '[1, 2]', '{"premise": "", "hypothesis": "b", '
                                      '"label": "neutral"}'])
    def test_malformed(self, tmp_path, line):
        path = tmp_path / "bad.jsonl"
        path.write_text(line + "\n", encoding="utf-8")
        with pytest.raises(DataError, match=":1:"):
            load_nli(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("", encoding="utf-8")
        with pytest.raises(UsageError):
            load_nli(path)

    def test_missing(self, tmp_path):
        with pytest.raises(DataError):
            load_nli(tmp_path / "missing.jsonl")

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(text, text, st.sampled_from(LABELS)), min_size=1, max_size=10))
    def test_round_trip(self, tmp_path_factory, recs):
        path = tmp_path_factory.mktemp("nli") / "rt.jsonl"
        pairs = [LabeledPair(*r) for r in recs]
        write_nli(pairs, path)
        assert load_nli(path) == pairs


class TestSts:
    def test_round_trip(self, tmp_path):
        pairs = [StsPair("a b", "c, d.", 4.25, "s1"), StsPair("x", "y", 0.0, "s2"), StsPair("q", "r", 5.0, "s1")]
        write_sts(pairs, tmp_path / "sts.tsv")
        assert load_sts(tmp_path / "sts.tsv") == pairs

    @pytest.mark.parametrize("row,msg", [("s\ta\tb", "4 tab"), ("s\ta\tb\thigh", "not a number"),
                                         ("s\ta\tb\t7", "outside")])
    def test_bad_rows(self, tmp_path, row, msg):
        path = tmp_path / "sts.tsv"
        path.write_text("s\tok\tfine\t1.0\n" + row + "\n", encoding="utf-8")
        with pytest.raises(DataError, match=f":2: .*{msg}"):
            load_sts(path)


class TestProbeFiles:
    def test_round_trip_and_manifest(self, tmp_path):
        single = ProbeTask("single", [("good film", 1), ("bad film", 0)], 2)
        pair = ProbeTask("para", [(("a b", "b a"), 1), (("a", "c"), 0)], 2)
        write_probe_jsonl(single, tmp_path / "single.jsonl")
        write_probe_jsonl(pair, tmp_path / "para.jsonl")
        (tmp_path / "tasks.json").write_text(json.dumps({"tasks": [
            {"name": "single", "path": "single.jsonl", "n_classes": 2},
            {"name": "para", "path": "para.jsonl", "n_classes": 2}]}), encoding="utf-8")
        assert load_manifest(tmp_path / "tasks.json") == [single, pair]

    def test_label_out_of_range(self, tmp_path):
        path = tmp_path / "p.jsonl"
        path.write_text('{"text": "a", "label": 4}\n', encoding="utf-8")
        with pytest.raises(DataError, match=":1:"):
            load_probe_jsonl(path, "p", 2)

    def test_bad_manifest(self, tmp_path):
        path = tmp_path / "tasks.json"
        path.write_text('{"tasks": [{"name": "x"}]}', encoding="utf-8")
        with pytest.raises(DataError):
            load_manifest(path)


@pytest.fixture(scope="module")
def corpus():
    return gen_synth(SynthSpec(n_topics=4, premises_per_topic=50, hypotheses_per_premise=3))


class TestSynth:
    def test_sizes(self, corpus):
        assert len(corpus.train) == 600
        assert len(corpus.probe.examples) == 200 and corpus.probe.n_classes == 4
        assert len(corpus.sts) == 400

    def test_every_premise_has_an_entailment(self, corpus):
        premises = {p.premise for p in corpus.train}
        assert len(premises) == 200
        assert premises == {p.premise for p in corpus.train if p.label == "entailment"}
        gb = build_groups(corpus.train, ALLPALLN)
        assert len(gb.groups) == 200

    def test_held_out_sentences(self, corpus):
        train_premises = {p.premise for p in corpus.train}
        assert not train_premises & {p.sentence_a for p in corpus.sts}
        assert not train_premises & {t for t, _ in corpus.probe.examples}

    def test_sts_bands(self, corpus):
        assert {p.gold_score for p in corpus.sts} == {0.0, 1.0, 2.5, 4.0, 5.0}
        assert {p.subset_name for p in corpus.sts} == {"synth0", "synth1"}

    def test_deterministic(self, corpus):
        again = gen_synth(SynthSpec())
        assert again.train == corpus.train and again.sts == corpus.sts and again.probe == corpus.probe
        assert gen_synth(SynthSpec(seed=1)).train != corpus.train

    @settings(max_examples=15, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 12), st.integers(3, 6), st.integers(0, 10**6))
    def test_invariants_any_synth_config(self, topics, premises, hyps, seed):
        corpus = gen_synth(SynthSpec(topics, premises, hyps, sts_premises_per_topic=2, probe_per_topic=3,
                                     seed=seed))
        assert len(corpus.train) == topics * premises * hyps
        for i in range(0, len(corpus.train), hyps):
            block = corpus.train[i:i + hyps]
            assert len({p.premise for p in block}) == 1
            assert any(p.label == "entailment" for p in block)
        gb = build_groups(corpus.train, ALLPALLN)
        assert len(gb.groups) == topics * premises

    def test_bad_synth_config(self):
        with pytest.raises(ParameterError):
            SynthSpec(hypotheses_per_premise=2)
        with pytest.raises(ParameterError):
            SynthSpec(n_topics=50)
