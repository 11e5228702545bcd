"""Taint bitmap for the sensitive section."""
from __future__ import annotations

from ..errors import MisalignedSection
from ..layout import WORD


def build_taint_bitmap(sensitive: bytes) -> bytes:
    """One set bit per 64-bit word, word ``i`` in bit ``i % 8`` of byte ``i // 8``.

    This is the packing shadow memory uses, so a page's 64-byte slice of the
    bitmap can be copied into its shadow block unchanged.
    """
    if len(sensitive) % WORD:
        raise MisalignedSection(f"sensitive section is {len(sensitive)} bytes, not a multiple of 8")
    n_words = len(sensitive) // WORD
    out = bytearray((n_words + 7) // 8)
    for i in range(n_words):
        out[i >> 3] |= 1 << (i & 7)
    return bytes(out)


def bitmap_bit(bitmap: bytes, index: int) -> int:
    byte = index >> 3
    return (bitmap[byte] >> (index & 7)) & 1 if byte < len(bitmap) else 0
