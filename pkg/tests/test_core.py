import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simalign.core import (HEADER_SIZE, BadMagicError, CsvFormatError, EmbeddingSequence, FormatError,
                           GroundTruthSegment, ManifestEntry, ScoreMatrix, SegmentPrediction, ShapeMismatchError,
                           SimilarityMatrix, TruncatedError, ValidationError, load_embeddings,
                           load_manifest_embeddings, load_matrix, read_pairs_csv, read_segments_csv,
                           save_embeddings, save_matrix, write_manifest, write_pairs_csv, write_segments_csv)


def unit_rows(rng, t, d):
    x = rng.standard_normal((t, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def test_matrix_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    vals = rng.uniform(-1, 1, (128, 128)).astype(np.float32).astype(np.float64)
    save_matrix(SimilarityMatrix("q", "r", vals), tmp_path / "m.samm")
    back = load_matrix(tmp_path / "m.samm")
    assert np.array_equal(back.values, vals)


def test_one_by_one_matrix_layout(tmp_path):
    save_matrix(SimilarityMatrix("q", "r", [[0.5]]), tmp_path / "m.samm")
    raw = (tmp_path / "m.samm").read_bytes()
    # magic, version, dtype, rows, cols, then one float32
    assert HEADER_SIZE == 14
    assert len(raw) == HEADER_SIZE + 4
    assert raw[:4] == b"SAMM" and raw[4] == 1 and raw[5] == 0
    assert struct.unpack("<II", raw[6:14]) == (1, 1)
    assert struct.unpack("<f", raw[14:]) == (0.5,)
    assert load_matrix(tmp_path / "m.samm").values.tolist() == [[0.5]]


def test_bad_magic(tmp_path):
    p = tmp_path / "m.samm"
    save_matrix(SimilarityMatrix("q", "r", np.zeros((2, 3))), p)
    data = bytearray(p.read_bytes())
    data[:4] = b"XXXX"
    p.write_bytes(bytes(data))
    with pytest.raises(BadMagicError, match="bad magic"):
        load_matrix(p)


def test_embedding_file_is_not_a_matrix(tmp_path):
    rng = np.random.default_rng(1)
    save_embeddings(EmbeddingSequence("v", "m", unit_rows(rng, 3, 4)), tmp_path / "e.same")
    with pytest.raises(BadMagicError):
        load_matrix(tmp_path / "e.same")


def test_every_strict_prefix_fails(tmp_path):
    p = tmp_path / "m.samm"
    save_matrix(SimilarityMatrix("q", "r", np.full((3, 2), 0.25)), p)
    data = p.read_bytes()
    for n in range(len(data)):
        p.write_bytes(data[:n])
        with pytest.raises(FormatError):
            load_matrix(p)


def test_error_codes_are_distinct(tmp_path):
    p = tmp_path / "m.samm"
    save_matrix(SimilarityMatrix("q", "r", np.zeros((2, 2))), p)
    data = p.read_bytes()
    p.write_bytes(data[:-1])
    with pytest.raises(TruncatedError) as trunc:
        load_matrix(p)
    p.write_bytes(data + b"\0\0\0\0")
    with pytest.raises(ShapeMismatchError) as extra:
        load_matrix(p)
    assert len({trunc.value.code, extra.value.code, BadMagicError.code}) == 3


def test_embedding_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    frames = unit_rows(rng, 10, 16).astype(np.float32).astype(np.float64)
    save_embeddings(EmbeddingSequence("v", "m", frames), tmp_path / "e.same")
    back = load_embeddings(tmp_path / "e.same", "v", "m")
    assert np.array_equal(back.frames, frames)
    assert (back.video_id, back.model_id) == ("v", "m")


def test_embedding_norm_validation(tmp_path):
    frames = np.zeros((3, 4))
    frames[0, 0] = 1.0
    frames[1, 1] = 0.5
    save_embeddings(EmbeddingSequence("v", "m", frames), tmp_path / "e.same")
    with pytest.raises(ValidationError, match="norm"):
        load_embeddings(tmp_path / "e.same")


def test_zero_row_is_padding(tmp_path):
    frames = np.zeros((2, 4))
    frames[0, 2] = 1.0
    save_embeddings(EmbeddingSequence("v", "m", frames), tmp_path / "e.same")
    assert load_embeddings(tmp_path / "e.same").num_frames == 2


def test_embedding_shape_rules():
    with pytest.raises(ValidationError):
        EmbeddingSequence("v", "m", np.ones((3, 1)))
    with pytest.raises(ValidationError):
        EmbeddingSequence("v", "m", np.full((2, 2), np.nan))


def test_matrix_ranges():
    with pytest.raises(ValidationError):
        SimilarityMatrix("q", "r", [[1.01]])
    SimilarityMatrix("q", "r", [[1.0 + 5e-7, -1.0 - 5e-7]])
    with pytest.raises(ValidationError):
        ScoreMatrix("q", "r", [[-0.1]])


def test_segment_invariants():
    with pytest.raises(ValidationError):
        GroundTruthSegment("q", "r", 5, 5, 0, 1)
    with pytest.raises(ValidationError):
        GroundTruthSegment("q", "r", 0, 1, 3, 2)
    with pytest.raises(ValidationError):
        SegmentPrediction("q", "r", 0, 1, 0, 1, float("inf"))


def test_segments_csv_one_row(tmp_path):
    p = tmp_path / "gt.csv"
    p.write_text("query_id,ref_id,q_start,q_end,r_start,r_end\nQ1,R1,0,10.5,3,13.5\n")
    assert read_segments_csv(p) == [GroundTruthSegment("Q1", "R1", 0, 10.5, 3, 13.5)]


def test_segments_csv_rejects_inverted_interval(tmp_path):
    p = tmp_path / "gt.csv"
    p.write_text("query_id,ref_id,q_start,q_end,r_start,r_end\nQ1,R1,0,1,0,1\nQ1,R1,4,2,0,1\n")
    with pytest.raises(CsvFormatError, match="line 3"):
        read_segments_csv(p)


def test_segments_csv_header_must_match(tmp_path):
    p = tmp_path / "gt.csv"
    p.write_text("q,r,a,b,c,d\n")
    with pytest.raises(CsvFormatError, match="line 1"):
        read_segments_csv(p)


def test_segments_csv_bad_number(tmp_path):
    p = tmp_path / "pred.csv"
    p.write_text("query_id,ref_id,q_start,q_end,r_start,r_end,score\nQ,R,0,1,0,1,high\n")
    with pytest.raises(CsvFormatError, match="line 2"):
        read_segments_csv(p)


ids = st.text(alphabet="ABCQR0123456789_", min_size=1, max_size=8)
finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@st.composite
def predictions(draw):
    q0, r0 = draw(finite), draw(finite)
    dq = draw(st.floats(1e-3, 1e4))
    dr = draw(st.floats(1e-3, 1e4))
    return SegmentPrediction(draw(ids), draw(ids), q0, q0 + dq, r0, r0 + dr, draw(finite))


@settings(max_examples=100, deadline=None)
@given(st.lists(predictions(), min_size=1, max_size=20))
def test_prediction_csv_round_trip(tmp_path_factory, rows):
    p = tmp_path_factory.mktemp("csv") / "pred.csv"
    write_segments_csv(rows, p)
    assert read_segments_csv(p) == rows


def test_hundred_random_gt_rows_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    rows = []
    for i in range(100):
        q0, r0 = rng.uniform(0, 500, 2)
        rows.append(GroundTruthSegment(f"Q{i}", f"R{i % 7}", q0, q0 + rng.uniform(0.1, 60), r0,
                                       r0 + rng.uniform(0.1, 60)))
    write_segments_csv(rows, tmp_path / "gt.csv")
    assert read_segments_csv(tmp_path / "gt.csv") == rows


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_matrix_round_trip_property(tmp_path_factory, rows, cols, seed):
    vals = np.random.default_rng(seed).uniform(-1, 1, (rows, cols)).astype(np.float32).astype(np.float64)
    p = tmp_path_factory.mktemp("m") / "m.samm"
    save_matrix(ScoreMatrix("q", "r", np.abs(vals)), p)
    assert np.array_equal(load_matrix(p, "score").values, np.abs(vals))


def test_pairs_csv_round_trip(tmp_path):
    pairs = [("Q1", "R2"), ("Q0", "R0")]
    write_pairs_csv(pairs, tmp_path / "p.csv")
    assert read_pairs_csv(tmp_path / "p.csv") == pairs


def test_manifest_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    seq = EmbeddingSequence("V1", "m0", unit_rows(rng, 5, 8))
    save_embeddings(seq, tmp_path / "V1.same")
    write_manifest([ManifestEntry("V1", "m0", "V1.same", 5, "query")], tmp_path / "corpus.json")
    loaded = load_manifest_embeddings(tmp_path / "corpus.json")
    assert np.allclose(loaded[("V1", "m0")].frames, seq.frames, atol=1e-7)


def test_manifest_frame_count_checked(tmp_path):
    rng = np.random.default_rng(5)
    save_embeddings(EmbeddingSequence("V1", "m0", unit_rows(rng, 5, 8)), tmp_path / "V1.same")
    write_manifest([ManifestEntry("V1", "m0", "V1.same", 6)], tmp_path / "corpus.json")
    with pytest.raises(ValidationError, match="frames"):
        load_manifest_embeddings(tmp_path / "corpus.json")
