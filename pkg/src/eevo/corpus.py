"""Bundled byte-level demo prompts.

Bytes of a small text file are mapped to token ids ``byte % d_vocab`` and
cut into fixed-length windows, so every command runs without external data.
"""

from __future__ import annotations

from importlib import resources

from .errors import InvalidInputError


def demo_bytes() -> bytes:
    return resources.files("eevo").joinpath("data/demo_corpus.txt").read_bytes()


def encode(text: bytes | str, d_vocab: int) -> list[int]:
    if isinstance(text, str):
        text = text.encode("utf-8")
    return [b % d_vocab for b in text]


def demo_prompts(count: int, length: int, d_vocab: int, stride: int | None = None) -> list[list[int]]:
    """``count`` windows of ``length`` tokens, ``stride`` bytes apart (default ``length``)."""
    if count < 1 or length < 1:
        raise InvalidInputError(f"need count >= 1 and length >= 1, got {count}, {length}")
    data = encode(demo_bytes(), d_vocab)
    stride = stride or length
    if (count - 1) * stride + length > len(data):
        raise InvalidInputError(
            f"demo corpus has {len(data)} bytes, too short for {count} prompts of {length}"
        )
    return [data[i * stride : i * stride + length] for i in range(count)]
