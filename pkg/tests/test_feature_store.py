import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from magmine.feature_store import (
    HEADER,
    AnnotationSpan,
    FeatureFormatError,
    FeatureMatrix,
    ManifestError,
    VideoRecord,
    check_snippet_count,
    frame_labels_from_spans,
    load_manifest,
    parse_manifest,
    read_features,
    read_header,
    save_manifest,
    write_features,
)

finite_f32 = st.floats(allow_nan=False, allow_infinity=False, width=32)


def _doc(**over):
    rec_a = {"video_id": "a", "label": 1, "num_frames": 64, "spans": [[16, 48]], "feature_path": "a.fvec"}
    rec_n = {"video_id": "n", "label": 0, "num_frames": 40, "spans": [], "feature_path": "n.fvec"}
    doc = {"name": "t", "dim": 4, "snippet_len": 16, "splits": {"train": [rec_a, rec_n]}}
    doc.update(over)
    return doc


class TestFvec:
    def test_header_layout(self, tmp_path):
        p = tmp_path / "x.fvec"
        write_features(FeatureMatrix("x", np.arange(6, dtype=np.float32).reshape(3, 2)), p)
        raw = p.read_bytes()
        assert raw[:4] == b"FVEC"
        assert struct.unpack("<HHII", raw[4:16]) == (1, 0, 3, 2)
        assert len(raw) == 16 + 3 * 2 * 4
        assert np.frombuffer(raw[16:], "<f4").tolist() == [0, 1, 2, 3, 4, 5]

    @given(arrays(np.float32, st.tuples(st.integers(1, 20), st.integers(1, 12)), elements=finite_f32))
    def test_round_trip_is_bit_exact(self, tmp_path_factory, data):
        p = tmp_path_factory.mktemp("rt") / "v.fvec"
        write_features(FeatureMatrix("v", data), p)
        back = read_features(p)
        assert back.data.dtype == np.float32
        assert back.data.tobytes() == np.ascontiguousarray(data, "<f4").tobytes()
        assert read_header(p) == data.shape

    @pytest.mark.parametrize("mutate, match", [
        (lambda b: b"FVEX" + b[4:], "magic"),
        (lambda b: b[:4] + struct.pack("<H", 2) + b[6:], "version"),
        (lambda b: b[:-4], "payload"),
        (lambda b: b + b"\0\0\0\0", "payload"),
        (lambda b: b[:10], "truncated"),
    ])
    def test_corrupt_files_rejected(self, tmp_path, mutate, match):
        p = tmp_path / "x.fvec"
        write_features(FeatureMatrix("x", np.ones((3, 2))), p)
        p.write_bytes(mutate(p.read_bytes()))
        with pytest.raises(FeatureFormatError, match=match):
            read_features(p)

    def test_nan_payload_rejected(self, tmp_path):
        p = tmp_path / "x.fvec"
        p.write_bytes(HEADER.pack(b"FVEC", 1, 0, 1, 2) + np.array([1.0, np.nan], "<f4").tobytes())
        with pytest.raises(FeatureFormatError, match="non-finite"):
            read_features(p)

    def test_dim_mismatch(self, tmp_path):
        p = tmp_path / "x.fvec"
        write_features(FeatureMatrix("x", np.ones((3, 2))), p)
        with pytest.raises(FeatureFormatError, match="dim"):
            read_features(p, expected_dim=5)

    def test_refuses_non_finite_and_overflow(self, tmp_path):
        with pytest.raises(ValueError):
            FeatureMatrix("x", np.array([[np.inf]]))
        with pytest.raises(ValueError, match="overflow"):
            write_features(FeatureMatrix("x", np.array([[1e300]])), tmp_path / "x.fvec")


class TestSnippetCount:
    @pytest.mark.parametrize("frames, L, T, ok", [
        (64, 16, 4, True), (79, 16, 4, True), (80, 16, 4, False), (63, 16, 4, False),
        (10, 16, 1, True), (10, 16, 2, False), (16, 16, 1, True),
    ])
    def test_rule(self, frames, L, T, ok):
        rec = VideoRecord("v", 0, frames, "v.fvec", [], L)
        if ok:
            check_snippet_count(rec, T)
        else:
            with pytest.raises(ManifestError):
                check_snippet_count(rec, T)


class TestManifest:
    def test_parse_and_frame_labels(self):
        m = parse_manifest(_doc(), check_features=False)
        a = m.records("train")[0]
        lab = frame_labels_from_spans(a)
        assert lab.sum() == 32 and lab[16] == 1 and lab[15] == 0 and lab[48] == 0

    @pytest.mark.parametrize("patch, match", [
        ({"marginn": 1}, "unknown keys"),
        ({"splits": {"train": [], "holdout": []}}, "unknown splits"),
        ({"dim": 0}, "positive"),
    ])
    def test_top_level_errors(self, patch, match):
        with pytest.raises(ManifestError, match=match):
            parse_manifest(_doc(**patch), check_features=False)

    @pytest.mark.parametrize("field, value, match", [
        ("label", 2, "label"),
        ("label", True, "label"),
        ("spans", [[16, 40], [30, 50]], "overlap"),
        ("spans", [[40, 50], [10, 20]], "overlap"),
        ("spans", [[16, 80]], "beyond"),
        ("spans", [[20, 20]], "bad span"),
        ("num_frames", 0, "num_frames"),
        ("extra", 1, "unknown"),
    ])
    def test_record_errors(self, field, value, match):
        doc = _doc()
        doc["splits"]["train"][0][field] = value
        with pytest.raises(ManifestError, match=match):
            parse_manifest(doc, check_features=False)

    def test_normal_video_with_spans(self):
        doc = _doc()
        doc["splits"]["train"][1]["spans"] = [[0, 16]]
        with pytest.raises(ManifestError, match="normal"):
            parse_manifest(doc, check_features=False)

    def test_train_needs_both_classes(self):
        doc = _doc()
        doc["splits"]["train"] = doc["splits"]["train"][:1]
        with pytest.raises(ManifestError, match="abnormal and one normal"):
            parse_manifest(doc, check_features=False)

    def test_duplicate_ids(self):
        doc = _doc()
        doc["splits"]["test"] = [dict(doc["splits"]["train"][1])]
        with pytest.raises(ManifestError, match="duplicate"):
            parse_manifest(doc, check_features=False)

    def test_feature_checks(self, tmp_path):
        doc = _doc()
        (tmp_path / "m.json").write_text(json.dumps(doc))
        with pytest.raises(ManifestError, match="not found"):
            load_manifest(tmp_path / "m.json")
        write_features(FeatureMatrix("a", np.zeros((4, 4))), tmp_path / "a.fvec")
        write_features(FeatureMatrix("n", np.zeros((3, 4))), tmp_path / "n.fvec")
        with pytest.raises(ManifestError, match="inconsistent"):
            load_manifest(tmp_path / "m.json")
        write_features(FeatureMatrix("n", np.zeros((2, 3))), tmp_path / "n.fvec")
        with pytest.raises(ManifestError, match="dim"):
            load_manifest(tmp_path / "m.json")
        write_features(FeatureMatrix("n", np.ones((2, 4))), tmp_path / "n.fvec")
        m = load_manifest(tmp_path / "m.json")
        assert m.load(m.records("train")[1]).dtype == np.float64

    def test_save_load_round_trip(self, tiny_corpus, tmp_path):
        root, m = tiny_corpus
        save_manifest(m, root / "copy.json")
        again = load_manifest(root / "copy.json")
        assert again.to_json() == m.to_json()

    def test_span_is_frozen(self):
        s = AnnotationSpan(0, 4)
        with pytest.raises(AttributeError):
            s.start_frame = 1
