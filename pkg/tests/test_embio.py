from pathlib import Path

import numpy as np
import pytest

from mahaguard.embio import EmbeddingSet, read_csv, read_emb, write_emb
from mahaguard.errors import (
    BadMagic,
    DimensionMismatch,
    LabelOutOfRange,
    NonFiniteValue,
    ParseError,
    RaggedRows,
    TruncatedFile,
    UnsupportedVersion,
    ValidationError,
)


def test_minimal_file_byte_count(tmp_path):
    # header: 4 magic + 1 version + 4 n + 4 d + 1 flag = 14, payload: 1 float64
    path = tmp_path / "min.emb"
    write_emb(EmbeddingSet(np.array([[0.5]])), path)
    assert path.stat().st_size == 14 + 8


def test_roundtrip_unlabeled_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    data = rng.standard_normal((17, 5))
    path = tmp_path / "x.emb"
    write_emb(EmbeddingSet(data), path)
    back = read_emb(path)
    assert back.labels is None
    np.testing.assert_array_equal(back.data, data)


def test_roundtrip_labeled(tmp_path):
    rng = np.random.default_rng(1)
    data = rng.standard_normal((9, 3))
    labels = rng.integers(0, 4, size=9)
    path = tmp_path / "y.emb"
    write_emb(EmbeddingSet(data, labels=labels), path)
    back = read_emb(path)
    np.testing.assert_array_equal(back.data, data)
    np.testing.assert_array_equal(back.labels, labels)


def test_written_bytes_are_deterministic(tmp_path):
    data = np.linspace(0, 1, 12).reshape(4, 3)
    a, b = tmp_path / "a.emb", tmp_path / "b.emb"
    write_emb(EmbeddingSet(data, labels=[0, 1, 1, 0]), a)
    write_emb(EmbeddingSet(data, labels=[0, 1, 1, 0]), b)
    assert a.read_bytes() == b.read_bytes()


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.emb"
    write_emb(EmbeddingSet(np.ones((2, 2))), path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(BadMagic):
        read_emb(path)


def test_unsupported_version(tmp_path):
    path = tmp_path / "v9.emb"
    write_emb(EmbeddingSet(np.ones((2, 2))), path)
    raw = bytearray(path.read_bytes())
    raw[4] = 9
    path.write_bytes(bytes(raw))
    with pytest.raises(UnsupportedVersion):
        read_emb(path)


def test_truncated_payload_names_byte_counts(tmp_path):
    path = tmp_path / "t.emb"
    write_emb(EmbeddingSet(np.ones((3, 4))), path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-5])
    with pytest.raises(TruncatedFile) as err:
        read_emb(path)
    assert "96" in str(err.value) and "91" in str(err.value)


def test_trailing_garbage_rejected(tmp_path):
    path = tmp_path / "g.emb"
    write_emb(EmbeddingSet(np.ones((2, 2))), path)
    path.write_bytes(path.read_bytes() + b"\x00\x00")
    with pytest.raises(TruncatedFile):
        read_emb(path)


def test_nonfinite_payload_rejected(tmp_path):
    path = tmp_path / "nan.emb"
    write_emb(EmbeddingSet(np.ones((2, 2))), path)
    raw = bytearray(path.read_bytes())
    raw[14:22] = np.array([np.nan]).tobytes()
    path.write_bytes(bytes(raw))
    with pytest.raises(NonFiniteValue):
        read_emb(path)


def test_negative_label_in_file_rejected(tmp_path):
    path = tmp_path / "neg.emb"
    write_emb(EmbeddingSet(np.ones((2, 2)), labels=[0, 1]), path)
    raw = bytearray(path.read_bytes())
    raw[-4:] = np.array([-1], dtype="<i4").tobytes()
    path.write_bytes(bytes(raw))
    with pytest.raises(LabelOutOfRange):
        read_emb(path)


def test_constructor_validation():
    with pytest.raises(NonFiniteValue):
        EmbeddingSet(np.array([[np.inf, 0.0]]))
    with pytest.raises(DimensionMismatch):
        EmbeddingSet(np.ones((3, 2)), labels=[0, 1])
    with pytest.raises(LabelOutOfRange):
        EmbeddingSet(np.ones((2, 2)), labels=[0, -1])
    with pytest.raises(ValidationError):
        EmbeddingSet(np.empty((0, 2)))


def test_read_csv_plain(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("1.0,2.0\n3.0,4.0\n")
    emb = read_csv(path)
    np.testing.assert_array_equal(emb.data, [[1.0, 2.0], [3.0, 4.0]])
    assert emb.labels is None


def test_read_csv_labeled(tmp_path):
    path = tmp_path / "l.csv"
    path.write_text("1.0,2.0,0\n3.0,4.0,1\n")
    emb = read_csv(path, has_labels=True)
    np.testing.assert_array_equal(emb.data, [[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(emb.labels, [0, 1])


def test_read_csv_ragged(tmp_path):
    path = tmp_path / "r.csv"
    path.write_text("1.0,2.0\n3.0,4.0,5.0\n")
    with pytest.raises(RaggedRows) as err:
        read_csv(path)
    assert err.value.line == 2


def test_read_csv_parse_error_location(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("1.0,2.0\n3.0,oops\n")
    with pytest.raises(ParseError) as err:
        read_csv(path)
    assert (err.value.line, err.value.column) == (2, 2)


def test_extractor_golden_file_reads_cleanly():
    # fixture produced by the companion feature extractor; pins the format
    # contract between the two components without requiring the extractor here
    golden = Path(__file__).parent / "golden" / "extractor_3sample.emb"
    emb = read_emb(golden)
    assert emb.n == 3 and emb.dim == 32
    assert emb.labels.tolist() == [0, 1, 2]
    assert np.isfinite(emb.data).all()
    logits = read_emb(golden.with_name("extractor_3sample.logits.emb"))
    assert logits.n == 3 and logits.dim == 3


def test_extractor_golden_matches_primary_writer(tmp_path):
    # equal contents produce byte-identical files from either component
    golden = Path(__file__).parent / "golden" / "extractor_3sample.emb"
    emb = read_emb(golden)
    rewritten = tmp_path / "rewritten.emb"
    write_emb(EmbeddingSet(emb.data, labels=emb.labels), rewritten)
    assert rewritten.read_bytes() == golden.read_bytes()


def test_csv_and_binary_agree_downstream(tmp_path):
    rng = np.random.default_rng(7)
    data = rng.standard_normal((6, 3)).round(6)
    labels = [0, 1, 0, 1, 0, 1]
    bin_path, csv_path = tmp_path / "s.emb", tmp_path / "s.csv"
    write_emb(EmbeddingSet(data, labels=labels), bin_path)
    csv_path.write_text(
        "\n".join(",".join([repr(float(v)) for v in row] + [str(l)]) for row, l in zip(data, labels))
    )
    a = read_emb(bin_path)
    b = read_csv(csv_path, has_labels=True)
    np.testing.assert_array_equal(a.data, b.data)
    np.testing.assert_array_equal(a.labels, b.labels)
