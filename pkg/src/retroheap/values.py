"""Uniform word-sized value encoding and object header layout.

Every value is one 64-bit word: an encoded scalar (low bit 1) or a heap
reference (word-aligned address, low bit 0).  Every heap object carries a
one-word header packing its payload length in words, an object tag, and
two colour bits used by the major collector.  The all-zero header is
reserved: it marks an object that has been promoted out of a minor arena,
in which case field 0 holds the forwarding reference.

Header layout (our choice; any round-tripping layout would do):

    bits 0..1   colour (2 bits)
    bits 2..9   tag    (8 bits)
    bits 10..63 payload size in words

Keeping the colour in the low bits means a colour transition is a masked
compare-and-swap on the word; no other field moves.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

WORD_BYTES = 8
WORD_MASK = (1 << 64) - 1

SCALAR_MIN = -(1 << 62)
SCALAR_MAX = (1 << 62) - 1

# Reserved header value: object was promoted, field 0 is the forward.
FORWARDED_HEADER = 0

_TAG_SHIFT = 2
_SIZE_SHIFT = 10
_COLOR_MASK = 0b11
_TAG_MASK = 0xFF


class Tag(enum.IntEnum):
    BLOCK = 0
    CLOSURE = 1
    LAZY = 2            # lazy protocol only
    FORCING = 3         # lazy protocol only
    FORWARD = 4         # lazy protocol only
    EPHEMERON = 5
    PROMOTION_BUSY = 6  # transient, minor promotion claim only


class State(enum.IntEnum):
    MARKED = 0
    UNMARKED = 1
    GARBAGE = 2
    FREE = 3


def encode_scalar(n: int) -> int:
    """Encode a signed 63-bit integer: shift left by one, set the low bit."""
    if not SCALAR_MIN <= n <= SCALAR_MAX:
        raise OverflowError("scalar out of 63-bit range: %d" % n)
    return ((n << 1) | 1) & WORD_MASK


def decode_scalar(w: int) -> int:
    if not w & 1:
        raise ValueError("word 0x%x is a reference, not a scalar" % w)
    s = w >> 1
    if s >= 1 << 62:
        s -= 1 << 63
    return s


def is_scalar(w: int) -> bool:
    return bool(w & 1)


def is_ref(w: int) -> bool:
    return not w & 1


def pack_header(size_words: int, tag: int, color_bits: int) -> int:
    assert 0 <= color_bits <= 3 and 0 <= tag <= _TAG_MASK and size_words >= 0
    return (size_words << _SIZE_SHIFT) | (tag << _TAG_SHIFT) | color_bits


def header_size(h: int) -> int:
    return h >> _SIZE_SHIFT


def header_tag(h: int) -> int:
    return (h >> _TAG_SHIFT) & _TAG_MASK
def header_color(h: int) -> int:
    return h & _COLOR_MASK


def header_with_color(h: int, color_bits: int) -> int:
    return (h & ~_COLOR_MASK) | color_bits


def header_with_tag(h: int, tag: int) -> int:
    return (h & ~(_TAG_MASK << _TAG_SHIFT)) | (tag << _TAG_SHIFT)


@dataclass(frozen=True)
class ColorMap:
    """The rotating assignment of the four 2-bit patterns to logical states.

    The free pattern is fixed across rotations; the other three rotate at
    each heap cycle so that yesterday's Marked objects need to be re-proven
    live and yesterday's Unmarked objects become sweepable Garbage.
    """

    marked: int
    unmarked: int
    garbage: int
    free: int

    def __post_init__(self):
        pats = (self.marked, self.unmarked, self.garbage, self.free)
        if sorted(pats) != [0, 1, 2, 3]:
            raise ValueError("colour patterns must be a permutation of 0..3")

    def rotated(self) -> "ColorMap":
        return ColorMap(
            marked=self.garbage,
            unmarked=self.marked,
            garbage=self.unmarked,
            free=self.free,
        )

    def state_of(self, color_bits: int) -> State:
        if color_bits == self.marked:
            return State.MARKED
        if color_bits == self.unmarked:
            return State.UNMARKED
        if color_bits == self.garbage:
            return State.GARBAGE
        return State.FREE


INITIAL_COLORS = ColorMap(marked=0, unmarked=1, garbage=2, free=3)


def logical_state(header: int, cm: ColorMap) -> State:
    return cm.state_of(header_color(header))
