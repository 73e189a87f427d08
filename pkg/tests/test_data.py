import json

import numpy as np
import pytest

from oodintent.data import (
    OOD_LABEL,
    EmbeddingTable,
    encode_utterance,
    load_clinc,
    load_embeddings,
    make_utterance,
    subsample_ood_train,
    tokenize,
)
from oodintent.errors import DataLoadError
from tests.conftest import make_clinc_raw


class TestTokenize:
    def test_lowercase_whitespace_split(self):
        assert tokenize("Book a Flight") == ("book", "a", "flight")

    def test_strips_edge_punctuation(self):
        assert tokenize("what's the weather, today?") == ("what's", "the", "weather", "today")

    def test_drops_pure_punctuation_tokens(self):
        assert tokenize("hello !! world") == ("hello", "world")


class TestLoadClinc:
    def test_full_variant_counts(self, clinc_shaped_files):
        bundle = load_clinc(clinc_shaped_files["full"], "full")
        assert len(bundle.train.ind) == 15000
        assert len(bundle.train.ood) == 100
        assert len(bundle.val.ind) == 3000
        assert len(bundle.val.ood) == 100
        assert len(bundle.test.ind) == 4500
        assert len(bundle.test.ood) == 1000
        assert len(bundle.intent_names) == 150

    def test_small_variant_counts(self, clinc_shaped_files):
        bundle = load_clinc(clinc_shaped_files["small"], "small")
        assert len(bundle.train.ind) == 7500
        assert len(bundle.train.ood) == 100
        assert len(bundle.val.ind) == 3000
        assert len(bundle.test.ind) == 4500

    def test_ood_entries_carry_marker(self, clinc_shaped_files):
        bundle = load_clinc(clinc_shaped_files["full"], "full")
        assert all(u.label == OOD_LABEL for u in bundle.train.ood)
        assert all(u.label != OOD_LABEL for u in bundle.train.ind)

    def test_intent_names_sorted_and_stable(self, clinc_shaped_files):
        a = load_clinc(clinc_shaped_files["full"], "full")
        b = load_clinc(clinc_shaped_files["full"], "full")
        assert a.intent_names == tuple(sorted(a.intent_names))
        assert a.intent_names == b.intent_names
        # bijection onto 0..149
        assert sorted(a.label_map.values()) == list(range(150))

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataLoadError, match="not found"):
            load_clinc(tmp_path / "nope.json", "full")

    def test_malformed_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{not json", encoding="utf-8")
        with pytest.raises(DataLoadError, match="malformed"):
            load_clinc(p, "full")

    def test_missing_keys(self, tmp_path):
        raw = make_clinc_raw("full")
        del raw["oos_val"]
        p = tmp_path / "missing.json"
        p.write_text(json.dumps(raw), encoding="utf-8")
        with pytest.raises(DataLoadError, match="oos_val"):
            load_clinc(p, "full")

    def test_empty_split(self, tmp_path):
        raw = make_clinc_raw("full")
        raw["train"] = []
        p = tmp_path / "empty.json"
        p.write_text(json.dumps(raw), encoding="utf-8")
        with pytest.raises(DataLoadError, match="empty split"):
            load_clinc(p, "full")

    def test_wrong_intent_count(self, tmp_path):
        raw = make_clinc_raw("full")
        # collapse one intent into another across all IND splits
        for key in ("train", "val", "test"):
            raw[key] = [[t, "intent_000" if l == "intent_001" else l] for t, l in raw[key]]
        p = tmp_path / "k149.json"
        p.write_text(json.dumps(raw), encoding="utf-8")
        with pytest.raises(DataLoadError, match="149"):
            load_clinc(p, "full")

    def test_wrong_split_size(self, tmp_path):
        raw = make_clinc_raw("full")
        raw["train"] = raw["train"][:-1]
        p = tmp_path / "short.json"
        p.write_text(json.dumps(raw), encoding="utf-8")
        with pytest.raises(DataLoadError, match="expected 15000"):
            load_clinc(p, "full")

    def test_fixture_mode_relaxes_checks(self, fixture_dir):
        bundle = load_clinc(fixture_dir / "data.json", "fixture", fixture=True)
        assert len(bundle.intent_names) == 5
        assert len(bundle.train.ind) == 100

    def test_reserved_marker_as_ind_label_rejected(self, tmp_path):
        raw = make_clinc_raw("full")
        raw["train"][0][1] = OOD_LABEL
        p = tmp_path / "marker.json"
        p.write_text(json.dumps(raw), encoding="utf-8")
        with pytest.raises(DataLoadError, match="reserved"):
            load_clinc(p, "full")


class TestLoadEmbeddings:
    def test_basic_line(self, tmp_path):
        p = tmp_path / "emb.txt"
        p.write_text("the 0.1 0.2 0.3\n", encoding="utf-8")
        table = load_embeddings(p, 3)
        np.testing.assert_allclose(table.vectors["the"], [0.1, 0.2, 0.3])
        assert table.skipped_lines == 0

    def test_wrong_arity_skipped_and_counted(self, tmp_path):
        p = tmp_path / "emb.txt"
        p.write_text("the 0.1 0.2\ncat 1.0 2.0 3.0\n", encoding="utf-8")
        table = load_embeddings(p, 3)
        assert "the" not in table
        assert "cat" in table
        assert table.skipped_lines == 1

    def test_non_numeric_and_non_finite_skipped(self, tmp_path):
        p = tmp_path / "emb.txt"
        p.write_text("a x y z\nb 1.0 nan 2.0\nc 1 2 3\n", encoding="utf-8")
        table = load_embeddings(p, 3)
        assert len(table) == 1
        assert table.skipped_lines == 2

    def test_empty_file_rejected(self, tmp_path):
        p = tmp_path / "emb.txt"
        p.write_text("", encoding="utf-8")
        with pytest.raises(DataLoadError, match="no parseable"):
            load_embeddings(p, 3)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataLoadError, match="not found"):
            load_embeddings(tmp_path / "none.txt", 3)


class TestEncodeUtterance:
    def _table(self, vecs):
        return EmbeddingTable(dimension=2, vectors={k: np.asarray(v, float) for k, v in vecs.items()})

    def test_mean_of_two_basis_vectors(self):
        table = self._table({"a": [1.0, 0.0], "b": [0.0, 1.0]})
        u = make_utterance("a b", "x")
        np.testing.assert_allclose(encode_utterance(u, table), [0.5, 0.5])

    def test_all_oov_encodes_to_zero(self):
        table = self._table({"a": [1.0, 0.0]})
        u = make_utterance("zzz", "x")
        np.testing.assert_allclose(encode_utterance(u, table), [0.0, 0.0])

    def test_mean_of_identical_vectors(self):
        table = self._table({"a": [2.0, 4.0]})
        u = make_utterance("a a", "x")
        np.testing.assert_allclose(encode_utterance(u, table), [2.0, 4.0])

    def test_permutation_invariance(self):
        table = self._table({"a": [1.0, 3.0], "b": [-2.0, 5.0], "c": [0.5, 0.5]})
        u1 = make_utterance("a b c", "x")
        u2 = make_utterance("c a b", "x")
        np.testing.assert_allclose(encode_utterance(u1, table), encode_utterance(u2, table))

    def test_multiplicity_matters_unless_vectors_equal(self):
        table = self._table({"a": [1.0, 0.0], "b": [0.0, 1.0]})
        once = encode_utterance(make_utterance("a b", "x"), table)
        doubled = encode_utterance(make_utterance("a a b", "x"), table)
        assert not np.allclose(once, doubled)
        same = self._table({"a": [1.0, 1.0], "b": [1.0, 1.0]})
        np.testing.assert_allclose(
            encode_utterance(make_utterance("a b", "x"), same),
            encode_utterance(make_utterance("a a b", "x"), same),
        )

    def test_unknown_tokens_skipped_in_mean(self):
        table = self._table({"a": [2.0, 0.0]})
        u = make_utterance("a zzz", "x")
        np.testing.assert_allclose(encode_utterance(u, table), [2.0, 0.0])


class TestSubsampleOodTrain:
    def test_full_size_is_identity(self, blob_bundle):
        bundle, _ = blob_bundle
        n = len(bundle.train.ood)
        out = subsample_ood_train(bundle, n, seed=3)
        assert out.train.ood == bundle.train.ood

    def test_zero_gives_empty(self, blob_bundle):
        bundle, _ = blob_bundle
        out = subsample_ood_train(bundle, 0, seed=3)
        assert out.train.ood == ()
        assert out.train.ind == bundle.train.ind

    def test_deterministic_per_seed(self, blob_bundle):
        bundle, _ = blob_bundle
        a = subsample_ood_train(bundle, 5, seed=42)
        b = subsample_ood_train(bundle, 5, seed=42)
        assert a.train.ood == b.train.ood

    def test_seed_sensitivity(self, blob_bundle):
        bundle, _ = blob_bundle
        chosen = {subsample_ood_train(bundle, 1, seed=s).train.ood[0].text for s in range(20)}
        assert len(chosen) >= 2

    def test_oversized_request_rejected(self, blob_bundle):
        bundle, _ = blob_bundle
        with pytest.raises(ValueError):
            subsample_ood_train(bundle, len(bundle.train.ood) + 1, seed=0)
