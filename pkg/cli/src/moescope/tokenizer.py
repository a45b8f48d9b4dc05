"""
Byte-level tokenizer. Every byte value b becomes token b + 34; the first 34
ids are special: pad (0), end-of-sequence (1) and 32 mask sentinels (2..33)
used by span corruption. Any byte string round-trips exactly.
"""

from .config import (
    BYTE_VOCAB_SIZE,
    EOS_ID,
    FIRST_SENTINEL_ID,
    NUM_SENTINELS,
    NUM_SPECIAL_TOKENS,
    PAD_ID,
)
from .errors import DecodeError


class ByteTokenizer:
    pad_id = PAD_ID
    eos_id = EOS_ID
    vocab_size = BYTE_VOCAB_SIZE
    num_special = NUM_SPECIAL_TOKENS

    def tokenize(self, data):
        """
        :param data: bytes (str is encoded as UTF-8 first)
        :returns: list of token ids

        """
        if isinstance(data, str):
            data = data.encode("utf-8")
        return [byte + NUM_SPECIAL_TOKENS for byte in data]

    def detokenize(self, ids):
        """
        Inverse of tokenize. Special tokens are not bytes and are rejected.

        :param ids: iterable of token ids in [34, 290)

        """
        out = bytearray()
        for token in ids:
            token = int(token)
            if not NUM_SPECIAL_TOKENS <= token < BYTE_VOCAB_SIZE:
                raise DecodeError(f"token id {token} is not a byte token")
            out.append(token - NUM_SPECIAL_TOKENS)
        return bytes(out)

    def sentinel_id(self, index):
        """Id of the index-th sentinel, counting down from the highest id"""
        if not 0 <= index < NUM_SENTINELS:
            raise DecodeError(f"no sentinel number {index}")
        return FIRST_SENTINEL_ID + NUM_SENTINELS - 1 - index

    def is_sentinel(self, token):
        return FIRST_SENTINEL_ID <= token < NUM_SPECIAL_TOKENS

    def is_byte(self, token):
        return NUM_SPECIAL_TOKENS <= token < BYTE_VOCAB_SIZE

    def decode_token(self, token):
        """
        Printable form of a single token for reports: specials as <pad>,
        <eos>, <s7>; whitespace and control bytes escaped, e.g. \\n, \\t,
        \\x7f; other bytes as Latin-1 characters.
        """
        token = int(token)
        if token == PAD_ID:
            return "<pad>"
        if token == EOS_ID:
            return "<eos>"
        if self.is_sentinel(token):
            return f"<s{token - FIRST_SENTINEL_ID}>"
        if not self.is_byte(token):
            raise DecodeError(f"token id {token} is outside the vocabulary")
        byte = token - NUM_SPECIAL_TOKENS
        named = {9: "\\t", 10: "\\n", 13: "\\r", 32: "\\s", 92: "\\\\"}
        if byte in named:
            return named[byte]
        if byte < 32 or 127 <= byte < 160:
            return f"\\x{byte:02x}"
        return bytes([byte]).decode("latin-1")


tokenizer = ByteTokenizer()
tokenize = tokenizer.tokenize
detokenize = tokenizer.detokenize
