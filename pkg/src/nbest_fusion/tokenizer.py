"""Shared character-level vocabulary with bos/eos/pad/sep specials."""

from __future__ import annotations

import string

PAD, BOS, EOS, SEP = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<sep>")

_CHARS = " \n" + string.ascii_letters + string.digits + string.punctuation


class CharTokenizer:
    """Fixed printable-ASCII vocabulary; every model in the package shares it."""

    pad_id, bos_id, eos_id, sep_id = PAD, BOS, EOS, SEP

    def __init__(self, chars: str = _CHARS):
        self.chars = chars
        self.itos = list(SPECIALS) + list(chars)
        self.stoi = {c: i + len(SPECIALS) for i, c in enumerate(chars)}

    @property
    def vocab_size(self) -> int:
        return len(self.itos)

    def encode(self, text: str) -> list[int]:
        try:
            return [self.stoi[c] for c in text]
        except KeyError as exc:
            raise ValueError(f"character {exc.args[0]!r} is not in the vocabulary") from None

    def decode(self, ids, strip_specials: bool = True) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i < len(SPECIALS):
                if not strip_specials:
                    out.append(SPECIALS[i])
                continue
            out.append(self.itos[i])
        return "".join(out)


TOKENIZER = CharTokenizer()
