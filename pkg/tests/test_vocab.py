import pytest

from vtqa.vocab import DEFAULT_CHARSET, Vocabulary


def test_ids_stable_for_same_construction():
    a = Vocabulary(DEFAULT_CHARSET, 8)
    b = Vocabulary(DEFAULT_CHARSET, 8)
    assert len(a) == len(b)
    assert a.char_id("A") == b.char_id("A")
    assert a.frame_marker_id(3) == b.frame_marker_id(3)


def test_encode_decode_round_trip():
    vocab = Vocabulary(DEFAULT_CHARSET, 4)
    text = "Stop 7 signs?"
    assert vocab.decode_text(vocab.encode_text(text)) == text


def test_decode_skips_control_tokens():
    vocab = Vocabulary(DEFAULT_CHARSET, 4)
    ids = [vocab.bos_id] + vocab.encode_text("ab") + [vocab.eos_id, vocab.pad_id]
    assert vocab.decode_text(ids) == "ab"


def test_unknown_character_rejected():
    vocab = Vocabulary("abc", 2)
    with pytest.raises(ValueError):
        vocab.char_id("z")


def test_duplicate_charset_rejected():
    with pytest.raises(ValueError):
        Vocabulary("aab", 2)


def test_frame_marker_range_enforced():
    vocab = Vocabulary("abc", 2)
    vocab.frame_marker_id(1)
    with pytest.raises(ValueError):
        vocab.frame_marker_id(2)
