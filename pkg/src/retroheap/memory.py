"""Simulated 64-bit word-addressed memory and virtual address space.

The runtime does not touch real process memory; it models a byte-addressed
virtual address space backed by fixed-size chunks of Python ints.  Chunks
are created when a range is mapped and discarded when it is unmapped, so a
load from an unmapped address (e.g. the reserved shadow region next to the
minor arenas) fails loudly instead of returning stale data.

Addresses are plain ints, always word-aligned for object references.  The
chunk size equals one major-heap page (4096 words), so pages map and unmap
exactly one chunk.
"""

from __future__ import annotations

import threading

from .values import WORD_BYTES

PAGE_WORDS = 4096
CHUNK_BYTES = PAGE_WORDS * WORD_BYTES
_CHUNK_SHIFT = CHUNK_BYTES.bit_length() - 1
_WORD_SHIFT = 3
_OFF_MASK = PAGE_WORDS - 1


class MemoryFault(Exception):
    """Access to an address with no mapped backing."""


class Memory:
    def __init__(self):
        self._chunks = {}
        # Single lock serialising compare-and-swap; plain loads and stores
        # of a word are already atomic under the scheduler model.
        self._cas_lock = threading.Lock()

    def map_range(self, base: int, size_bytes: int) -> None:
        """Back [base, base+size_bytes) with zeroed words.

        Ranges may share chunks (small minor arenas), so mapping an already
        backed chunk is a no-op rather than an error.
        """
        assert base % WORD_BYTES == 0 and size_bytes % WORD_BYTES == 0
        first = base >> _CHUNK_SHIFT
        last = (base + size_bytes - 1) >> _CHUNK_SHIFT
        for idx in range(first, last + 1):
            if idx not in self._chunks:
                self._chunks[idx] = [0] * PAGE_WORDS

    def unmap_range(self, base: int, size_bytes: int) -> None:
        first = base >> _CHUNK_SHIFT
        last = (base + size_bytes - 1) >> _CHUNK_SHIFT
        for idx in range(first, last + 1):
            self._chunks.pop(idx, None)

    def is_mapped(self, addr: int) -> bool:
        return (addr >> _CHUNK_SHIFT) in self._chunks

    def load(self, addr: int) -> int:
        try:
            return self._chunks[addr >> _CHUNK_SHIFT][(addr >> _WORD_SHIFT) & _OFF_MASK]
        except KeyError:
            raise MemoryFault("load from unmapped address 0x%x" % addr) from None

    def store(self, addr: int, word: int) -> None:
        try:
            self._chunks[addr >> _CHUNK_SHIFT][(addr >> _WORD_SHIFT) & _OFF_MASK] = word
        except KeyError:
            raise MemoryFault("store to unmapped address 0x%x" % addr) from None

    def cas(self, addr: int, expect: int, update: int) -> bool:
        with self._cas_lock:
            chunk = self._chunks.get(addr >> _CHUNK_SHIFT)
            if chunk is None:
                raise MemoryFault("cas on unmapped address 0x%x" % addr)
            off = (addr >> _WORD_SHIFT) & _OFF_MASK
            if chunk[off] != expect:
                return False
            chunk[off] = update
            return True

    def mapped_words(self) -> int:
        return len(self._chunks) * PAGE_WORDS


class AddressSpace:
    """Hands out non-overlapping address ranges, with alignment.

    Reservation is separate from mapping: a reserved range has addresses
    set aside (nothing else will be placed there) but no backing until
    Memory.map_range is called for the parts actually used.
    """

    def __init__(self, base: int = 1 << 32):
        self._cursor = base
        self._lock = threading.Lock()

    def reserve(self, size_bytes: int, align: int = CHUNK_BYTES) -> int:
        assert align & (align - 1) == 0, "alignment must be a power of two"
        with self._lock:
            base = (self._cursor + align - 1) & ~(align - 1)
            self._cursor = base + size_bytes
            return base
