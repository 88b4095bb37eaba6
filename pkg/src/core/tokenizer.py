from typing import Sequence

from src.core.errors import ContractError

EOS_ID: int = 0


def parse_tokens(text: str) -> list[int]:
    try:
        return [int(piece) for piece in text.split()]
    except ValueError as e:
        raise ContractError(f"non-integer token in {text!r}") from e


def format_tokens(ids: Sequence[int]) -> str:
    return " ".join(str(int(i)) for i in ids)


class WhitespaceTokenizer:
    """Whitespace-separated integer tokens; id 0 is reserved for <eos>."""

    def __init__(self, vocab_size: int):
        if vocab_size < 2:
            raise ContractError(f"vocab_size must be at least 2, got {vocab_size}")
        self.vocab_size = vocab_size

    def encode(self, text: str) -> list[int]:
        ids = parse_tokens(text)
        self.validate(ids)
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        return format_tokens(ids)

    def validate(self, ids: Sequence[int]) -> None:
        for token in ids:
            if not 0 < int(token) < self.vocab_size:
                raise ContractError(
                    f"unknown token id {token} (valid ids are 1..{self.vocab_size - 1}, 0 is <eos>)"
                )
