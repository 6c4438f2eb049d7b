import numpy as np
import pytest

from iclstreams import corpus
from iclstreams.errors import ConfigError
from iclstreams.rng import stream


def test_encode_decode_round_trip():
    text = "héllo wörld\n"
    ids = corpus.encode(text)
    assert ids.dtype == np.int64 and ids.max() < 256
    assert corpus.decode_text(ids) == text


def test_decode_drops_boundary():
    ids = np.array([104, 105, corpus.BOUNDARY, 33])
    assert corpus.decode(ids) == b"hi!"


def test_from_documents_inserts_boundaries():
    c = corpus.from_documents([b"ab", b"cde"])
    assert list(c.tokens) == [97, 98, 256, 99, 100, 101]
    assert c.doc_starts == (0, 3)
    assert len(c) == 6


def test_digest_depends_on_document_split():
    assert corpus.from_documents([b"ab", b"c"]).digest != corpus.from_documents([b"a", b"bc"]).digest


def test_ingest_file_and_separator(tmp_path):
    f = tmp_path / "a.txt"
    f.write_bytes(b"first story<|endoftext|>\nsecond story\n")
    c = corpus.ingest(f)
    assert len(c.doc_starts) == 2
    assert corpus.decode(c.tokens) == b"first storysecond story"


def test_ingest_directory_sorted(tmp_path):
    (tmp_path / "b.txt").write_text("bbb")
    (tmp_path / "a.txt").write_text("aa")
    c = corpus.ingest(tmp_path)
    assert list(c.tokens) == [97, 97, 256, 98, 98, 98]


def test_ingest_missing_path_names_it(tmp_path):
    missing = tmp_path / "nope.txt"
    with pytest.raises(OSError, match="nope.txt"):
        corpus.ingest(missing)


def test_sample_lm_batch_shift():
    c = corpus.from_documents([bytes(range(50))])
    x, y = corpus.sample_lm_batch(c, 8, 5, stream(0, "lm"))
    assert x.shape == y.shape == (5, 8)
    np.testing.assert_array_equal(x[:, 1:], y[:, :-1])
    np.testing.assert_array_equal(y - x, 1)  # consecutive bytes


def test_sample_lm_batch_short_corpus():
    c = corpus.from_documents([b"abc"])
    with pytest.raises(ConfigError):
        corpus.sample_lm_batch(c, 3, 1, stream(0))
