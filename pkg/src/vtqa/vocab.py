"""Character-level vocabulary shared by the gathering and tracing models."""

from __future__ import annotations

DEFAULT_CHARSET = (
    "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
    "abcdefghijklmnopqrstuvwxyz"
    "0123456789"
    " '?<>&.,-"
)

PAD = "[PAD]"
BOS = "[BOS]"
EOS = "[EOS]"
SEP = "[SEP]"
BOX = "[BOX]"
VIS = "[VIS]"
INST = "[INST]"

# Decoded empty transcriptions are presented downstream as this reserved answer.
UNREADABLE = "<unreadable>"


class Vocabulary:
    """Fixed token inventory: control tokens, per-observation frame markers,
    then single characters. Token ids are stable for a given (charset,
    max_observations) pair, which is what checkpoint headers record.
    """

    def __init__(self, charset: str = DEFAULT_CHARSET, max_observations: int = 16):
        if len(set(charset)) != len(charset):
            raise ValueError("charset contains duplicate characters")
        self.charset = charset
        self.max_observations = max_observations
        specials = [PAD, BOS, EOS, SEP, BOX, VIS, INST]
        specials += [f"[FRAME_{k}]" for k in range(max_observations)]
        self._tokens = specials + list(charset)
        self._index = {tok: i for i, tok in enumerate(self._tokens)}
        self.pad_id = self._index[PAD]
        self.bos_id = self._index[BOS]
        self.eos_id = self._index[EOS]
        self.sep_id = self._index[SEP]
        self.box_id = self._index[BOX]
        self.vis_id = self._index[VIS]
        self.inst_id = self._index[INST]

    def __len__(self) -> int:
        return len(self._tokens)

    def frame_marker_id(self, k: int) -> int:
        if not 0 <= k < self.max_observations:
            raise ValueError(f"frame marker index {k} out of range")
        return self._index[f"[FRAME_{k}]"]

    def char_id(self, ch: str) -> int:
        try:
            return self._index[ch]
        except KeyError:
            raise ValueError(f"character {ch!r} is not in the vocabulary") from None

    def encode_text(self, text: str) -> list[int]:
        return [self.char_id(ch) for ch in text]

    def token(self, token_id: int) -> str:
        return self._tokens[token_id]

    def decode_text(self, ids: list[int]) -> str:
        """Map character ids back to a string, skipping non-character tokens."""
        chars = []
        for i in ids:
            tok = self._tokens[i]
            if len(tok) == 1:
                chars.append(tok)
        return "".join(chars)
