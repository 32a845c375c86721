"""Zero-copy data plane: per-sandbox file-backed regions, slot grants, rings.

A region is shared by exactly two parties: the backend (which creates it and
is the sole slot allocator) and one sandbox. Layout, little-endian, byte
exact (see PROTOCOL.md):

    0x00  header, 64 bytes
    0x40  slot area          [64, ring_area_offset)
    ring_area_offset          downstream ring block (backend -> guest)
    ring_area_offset + block  upstream ring block   (guest -> backend)

Each ring block is a 192-byte control area (capacity at +0, consumer head at
+64, producer tail at +128, each on its own cache line) followed by
``capacity`` data bytes. Head and tail are free-running 64-bit counters, so
``tail - head`` is the ring occupancy and the classic full-vs-empty ambiguity
never arises.

Ordering contract: the producer writes payload bytes before publishing the
new tail, and the consumer copies bytes out before publishing the new head.
CPython on x86-64 gives aligned 8-byte mmap stores release/acquire semantics
for free; other architectures would need explicit fences here.
"""

from __future__ import annotations

import mmap
import os
import struct
from dataclasses import dataclass

from .errors import AttachError, CapacityExceeded, RegionFull

MAGIC = 0x4E58_5553_4D45_4D30
VERSION = 1
HEADER_BYTES = 64
SLOT_ALIGN = 64
PAGE = 4096
RING_CTRL_BYTES = 192
DEFAULT_RING_BYTES = 4 * 1024 * 1024
DEFAULT_REGION_CAP = 256 * 1024 * 1024

MODE_SLOT = 0
MODE_RING = 1

_HEADER = struct.Struct("<QIIQQQ")  # magic, version, mode, alloc_cursor, ring_area_offset, ring_capacity

_OFF_CURSOR = 16
_OFF_CAPACITY = 0
_OFF_HEAD = 64
_OFF_TAIL = 128


def fnv1a_64(data) -> int:
    """64-bit FNV-1a over a bytes-like object."""
    h = 0xCBF29CE484222325
    for b in bytes(data):
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def align_up(value: int, boundary: int) -> int:
    return (value + boundary - 1) // boundary * boundary


def region_file_name(region_id: int) -> str:
    return f"nexus-region-{region_id}"


@dataclass(frozen=True)
class RegionDescriptor:
    region_id: int
    file_name: str
    size_bytes: int
    mode: int = MODE_SLOT


@dataclass(frozen=True)
class SlotGrant:
    region_id: int
    offset: int
    length: int
    checksum: int = 0


class Ring:
    """One direction of the streaming fallback; strictly single producer,
    single consumer. Partial writes and empty reads are normal; callers poll
    or sleep per their own policy."""

    def __init__(self, mm, block_offset: int, capacity: int):
        self._mm = mm
        self._base = block_offset
        self._data = block_offset + RING_CTRL_BYTES
        self.capacity = capacity

    @property
    def head(self) -> int:
        return struct.unpack_from("<Q", self._mm, self._base + _OFF_HEAD)[0]

    @property
    def tail(self) -> int:
        return struct.unpack_from("<Q", self._mm, self._base + _OFF_TAIL)[0]

    def _publish(self, offset: int, value: int) -> None:
        struct.pack_into("<Q", self._mm, self._base + offset, value)

    def used(self) -> int:
        return self.tail - self.head

    def free(self) -> int:
        return self.capacity - self.used()

    def write(self, src) -> int:
        """Producer side: copy in up to len(src) bytes, publish the new tail,
        return the count written (0 means the ring is full)."""
        src = memoryview(src)
        tail = self.tail
        n = min(len(src), self.capacity - (tail - self.head))
        if n <= 0:
            return 0
        pos = tail % self.capacity
        first = min(n, self.capacity - pos)
        mv = memoryview(self._mm)
        mv[self._data + pos:self._data + pos + first] = src[:first]
        if n > first:
            mv[self._data:self._data + n - first] = src[first:n]
        self._publish(_OFF_TAIL, tail + n)
        return n

    def read(self, max_bytes: int) -> bytes:
        """Consumer side: copy out up to max_bytes in production order and
        publish the new head; empty return means an empty ring."""
        head = self.head
        n = min(max_bytes, self.tail - head)
        if n <= 0:
            return b""
        pos = head % self.capacity
        first = min(n, self.capacity - pos)
        mv = memoryview(self._mm)
        out = bytearray(n)
        out[:first] = mv[self._data + pos:self._data + pos + first]
        if n > first:
            out[first:] = mv[self._data:self._data + n - first]
        self._publish(_OFF_HEAD, head + n)
        return bytes(out)

    def check(self) -> None:
        used = self.used()
        assert 0 <= used <= self.capacity, f"ring occupancy {used} out of range"


class Region:
    """Backend-side owner of a shared region: creates the file, lays out the
    header and rings, and is the single slot allocator.

    Slots are bump-allocated at 64-byte alignment. Invocations are short
    lived, so instead of a general allocator the cursor resets to the start
    of the slot area whenever no grants are live; grants pinned by in-flight
    asynchronous writes keep the cursor from resetting until they complete.
    """

    def __init__(self, path: str, region_id: int, size_bytes: int, mode: int,
                 ring_area_offset: int, ring_capacity: int, mm, file_obj):
        self.path = path
        self.region_id = region_id
        self.size_bytes = size_bytes
        self.mode = mode
        self.ring_area_offset = ring_area_offset
        self.ring_capacity = ring_capacity
        self._mm = mm
        self._file = file_obj
        self._live: dict[int, int] = {}  # offset -> length, audit of live grants
        self.bytes_written = 0
        self.peak_slot_bytes = 0
        if ring_capacity:
            block = RING_CTRL_BYTES + ring_capacity
            self.down_ring = Ring(mm, ring_area_offset, ring_capacity)
            self.up_ring = Ring(mm, ring_area_offset + block, ring_capacity)
        else:
            self.down_ring = None
            self.up_ring = None

    # -- construction --------------------------------------------------

    @classmethod
    def create(cls, directory: str, region_id: int, size_bytes: int, mode: int = MODE_SLOT,
               ring_bytes: int = DEFAULT_RING_BYTES, cap: int = DEFAULT_REGION_CAP) -> "Region":
        """Create and initialize a region file sized for ``size_bytes`` of
        header-plus-slot space (RING mode ignores the slot area)."""
        if ring_bytes and ring_bytes & (ring_bytes - 1):
            raise ValueError("ring capacity must be a power of two")
        if mode == MODE_RING:
            ring_area_offset = HEADER_BYTES
        else:
            ring_area_offset = align_up(max(size_bytes, HEADER_BYTES), SLOT_ALIGN)
        ring_total = 2 * (RING_CTRL_BYTES + ring_bytes) if ring_bytes else 0
        total = align_up(ring_area_offset + ring_total, PAGE)
        if total > cap:
            raise CapacityExceeded(f"region of {total} bytes exceeds cap {cap}")
        path = os.path.join(directory, region_file_name(region_id))
        file_obj = open(path, "w+b")
        try:
            file_obj.truncate(total)
            mm = mmap.mmap(file_obj.fileno(), total)
        except OSError:
            file_obj.close()
            raise
        _HEADER.pack_into(mm, 0, MAGIC, VERSION, mode, HEADER_BYTES, ring_area_offset, ring_bytes)
        if ring_bytes:
            for block in (ring_area_offset, ring_area_offset + RING_CTRL_BYTES + ring_bytes):
                struct.pack_into("<Q", mm, block + _OFF_CAPACITY, ring_bytes)
                struct.pack_into("<Q", mm, block + _OFF_HEAD, 0)
                struct.pack_into("<Q", mm, block + _OFF_TAIL, 0)
        return cls(path, region_id, total, mode, ring_area_offset, ring_bytes, mm, file_obj)

    def descriptor(self) -> RegionDescriptor:
        return RegionDescriptor(self.region_id, self.path, self.size_bytes, self.mode)

    # -- slot allocation -------------------------------------------------

    @property
    def alloc_cursor(self) -> int:
        return struct.unpack_from("<Q", self._mm, _OFF_CURSOR)[0]

    def _set_cursor(self, value: int) -> None:
        struct.pack_into("<Q", self._mm, _OFF_CURSOR, value)

    def slot_space_end(self) -> int:
        return self.ring_area_offset

    def grant_slot(self, length: int) -> SlotGrant:
        cursor = self.alloc_cursor
        if not self._live and cursor != HEADER_BYTES:
            cursor = HEADER_BYTES  # bump-reset between invocations
        if cursor + length > self.slot_space_end():
            raise RegionFull(
                f"need {length} bytes at {cursor}, slot area ends at {self.slot_space_end()}")
        grant = SlotGrant(self.region_id, cursor, length)
        for off, ln in self._live.items():
            if off < cursor + max(length, 1) and cursor < off + max(ln, 1):
                raise AssertionError("overlapping live grants")
        self._live[cursor] = length
        self._set_cursor(cursor + align_up(max(length, 1), SLOT_ALIGN))
        used = self.alloc_cursor - HEADER_BYTES
        self.peak_slot_bytes = max(self.peak_slot_bytes, used)
        return grant

    def release_grant(self, grant: SlotGrant) -> None:
        self._live.pop(grant.offset, None)
        if not self._live:
            self._set_cursor(HEADER_BYTES)

    def live_grants(self) -> list[tuple[int, int]]:
        return sorted(self._live.items())

    # -- data access -----------------------------------------------------

    def view(self, offset: int, length: int) -> memoryview:
        return memoryview(self._mm)[offset:offset + length]

    def write(self, offset: int, data) -> None:
        data = memoryview(data)
        mv = memoryview(self._mm)
        mv[offset:offset + len(data)] = data
        self.bytes_written += len(data)

    def count_written(self, n: int) -> None:
        """Account bytes written through an external zero-copy path (e.g.
        a socket receive directly into a slot view)."""
        self.bytes_written += n

    def checksum(self, grant: SlotGrant) -> int:
        return fnv1a_64(self.view(grant.offset, grant.length))

    def close(self, unlink: bool = False) -> None:
        try:
            self._mm.close()
        except BufferError:
            pass  # an exported view outlived the region; leave the map to the GC
        finally:
            self._file.close()
            if unlink:
                try:
                    os.unlink(self.path)
                except FileNotFoundError:
                    pass


def verify_slot(grant: SlotGrant, region) -> bool:
    """True iff the FNV-1a-64 of the granted window matches the grant."""
    return fnv1a_64(region.view(grant.offset, grant.length)) == grant.checksum


class RegionAttachment:
    """Guest-side mapping of an existing region; validates the header before
    any other access and exposes read views plus the two rings."""

    def __init__(self, path: str):
        try:
            self._file = open(path, "r+b")
        except OSError as exc:
            raise AttachError(f"cannot open region file {path}: {exc}") from None
        try:
            size = os.fstat(self._file.fileno()).st_size
            if size < HEADER_BYTES:
                raise AttachError(f"region file {path} too small")
            self._mm = mmap.mmap(self._file.fileno(), size)
        except OSError as exc:
            self._file.close()
            raise AttachError(f"cannot map region file {path}: {exc}") from None
        magic, version, mode, _cursor, ring_off, ring_cap = _HEADER.unpack_from(self._mm, 0)
        if magic != MAGIC:
            self.close()
            raise AttachError(f"bad region magic 0x{magic:016x}")
        if version != VERSION:
            self.close()
            raise AttachError(f"unsupported region version {version}")
        self.path = path
        self.size_bytes = size
        self.mode = mode
        self.ring_area_offset = ring_off
        self.ring_capacity = ring_cap
        if ring_cap:
            block = RING_CTRL_BYTES + ring_cap
            self.down_ring = Ring(self._mm, ring_off, ring_cap)
            self.up_ring = Ring(self._mm, ring_off + block, ring_cap)
        else:
            self.down_ring = None
            self.up_ring = None

    def view(self, offset: int, length: int) -> memoryview:
        if offset + length > self.size_bytes:
            raise AttachError("view outside region bounds")
        return memoryview(self._mm)[offset:offset + length]

    def write(self, offset: int, data) -> None:
        data = memoryview(data)
        memoryview(self._mm)[offset:offset + len(data)] = data

    def close(self) -> None:
        try:
            self._mm.close()
        except (BufferError, AttributeError):
            pass
        self._file.close()
