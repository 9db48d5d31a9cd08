import numpy as np
import pytest

from sgdiff import tensor as T
from sgdiff.gradcheck import grad_check
from sgdiff.textenc import TextEncoder, Vocabulary, pad_batch, tokenize

VOCAB = Vocabulary.from_grammar()


def test_reserved_ids():
    assert (VOCAB.pad_id, VOCAB.unk_id, VOCAB.null_id) == (0, 1, 2)


def test_tokenize_examples():
    assert tokenize("", VOCAB) == []
    assert tokenize("A red circle.", VOCAB) == [VOCAB["a"], VOCAB["red"], VOCAB["circle"]]
    assert tokenize("zzz-unknown", VOCAB) == [VOCAB.unk_id]


def test_vocabulary_file_round_trip(tmp_path):
    VOCAB.save(tmp_path / "vocab.txt")
    lines = (tmp_path / "vocab.txt").read_text().splitlines()
    assert lines[:3] == ["<pad>", "<unk>", "<null>"]
    assert Vocabulary.load(tmp_path / "vocab.txt") == VOCAB


def test_duplicate_tokens_rejected():
    with pytest.raises(ValueError):
        Vocabulary(["a", "a"])


def _encoder(seed=0):
    return TextEncoder(len(VOCAB), d_text=16, n_layers=2, heads=4, max_len=8, rng=np.random.default_rng(seed))


@pytest.mark.parametrize("L", [1, 3, 8])
def test_encode_shape(L):
    ids = np.arange(3, 3 + L) % len(VOCAB) + 3
    ids = np.minimum(ids, len(VOCAB) - 1)
    assert _encoder().encode(ids).seq.shape == (L, 16)


def test_encode_is_position_sensitive_and_deterministic():
    enc = _encoder()
    a, b = VOCAB["red"], VOCAB["circle"]
    x = enc.encode(np.array([a, b])).seq.data
    y = enc.encode(np.array([b, a])).seq.data
    assert not np.allclose(x, y)
    assert np.array_equal(x, enc.encode(np.array([a, b])).seq.data)


def test_over_length_rejected():
    with pytest.raises(ValueError):
        _encoder().encode(np.ones(9, dtype=np.int64) * 3)
    with pytest.raises(ValueError):
        pad_batch([[3] * 9], 8)


def test_padding_does_not_leak():
    enc = _encoder()
    ids = [VOCAB["a"], VOCAB["blue"], VOCAB["square"]]
    with T.default_dtype(np.float64):
        enc64 = _encoder()
        short = enc64.encode(np.array(ids)).seq.data
        padded = enc64.encode(np.array(ids + [0, 0, 0])).seq.data
    np.testing.assert_allclose(padded[:3], short, atol=1e-6)
    assert np.all(padded[3:] == 0)
    batch, mask = pad_batch([ids, ids[:1]], 8)
    out = enc.encode(batch)
    assert out.seq.shape == (2, 3, 16) and mask.tolist() == [[True] * 3, [True, False, False]]


def test_encoder_gradient_check():
    with T.default_dtype(np.float64):
        enc = TextEncoder(len(VOCAB), d_text=8, n_layers=1, heads=2, max_len=8, rng=np.random.default_rng(3))
        ids = np.array([[3, 5, 7, 0], [4, 9, 0, 0]])
        proj = np.random.default_rng(4).standard_normal((2, 4, 8))
        err = grad_check(lambda: T.tsum(enc.encode(ids).seq * proj), enc.parameters())
    assert err < 1e-4
