"""Page-granular helpers: demand paging for fast restart, copy-on-write capture for forked checkpoints."""

import threading
import zlib

from ..errors import CorruptImage
from ..guest_vm.machine import PAGE_SHIFT, PAGE_SIZE


class DemandPager:
    """Pulls guest RAM pages out of a mapped image on first touch.

    The section CRC covers the whole section, so it is checked once the
    last page has been pulled in, against the mapped source (the guest
    may already have written to RAM by then).
    """

    def __init__(self, source, offset, length, ram, crc32, section="ram", on_complete=None):
        self.source = source
        self.offset = offset
        self.length = length
        self.ram = ram
        self.crc32 = crc32
        self.section = section
        self.on_complete = on_complete
        self.npages = length >> PAGE_SHIFT
        self.present = bytearray(self.npages)
        self.remaining = self.npages
        self.faults = 0
        if self.remaining == 0:
            self._complete()

    def ensure(self, page):
        if self.present[page]:
            return
        lo = page << PAGE_SHIFT
        src = self.offset + lo
        self.ram[lo:lo + PAGE_SIZE] = self.source[src:src + PAGE_SIZE]
        self.present[page] = 1
        self.faults += 1
        self.remaining -= 1
        if self.remaining == 0:
            self._complete()

    def ensure_range(self, lo, hi):
        for p in range(lo, hi):
            if not self.present[p]:
                self.ensure(p)

    def materialize_all(self):
        self.ensure_range(0, self.npages)

    def _complete(self):
        with memoryview(self.source) as view:
            actual = zlib.crc32(view[self.offset:self.offset + self.length])
        if actual != self.crc32:
            raise CorruptImage(
                f"section {self.section!r}: crc32 {actual:#010x} != expected {self.crc32:#010x}",
                section=self.section, expected=self.crc32, actual=actual)
        if self.on_complete is not None:
            self.on_complete(self)


class CowGuard:
    """Snapshot isolation for guest RAM while the guest keeps running.

    The interpreter calls :meth:`before_write` ahead of every RAM store
    while the guard is armed; the first write to a page the serializer
    has not copied yet preserves the original contents.  :meth:`snapshot`
    therefore returns RAM exactly as it was when the guard was armed.
    """

    def __init__(self, ram):
        self.ram = ram
        self.npages = len(ram) >> PAGE_SHIFT
        self.copied = bytearray(self.npages)
        self.saved = {}
        self.lock = threading.Lock()

    def before_write(self, page):
        if self.copied[page] or page in self.saved:
            return
        with self.lock:
            if not self.copied[page] and page not in self.saved:
                lo = page << PAGE_SHIFT
                self.saved[page] = bytes(self.ram[lo:lo + PAGE_SIZE])

    def snapshot(self, chunk_pages=1024):
        out = bytearray(len(self.ram))
        for first in range(0, self.npages, chunk_pages):
            last = min(self.npages, first + chunk_pages)
            lo, hi = first << PAGE_SHIFT, last << PAGE_SHIFT
            with self.lock:
                out[lo:hi] = self.ram[lo:hi]
                for page in [p for p in self.saved if first <= p < last]:
                    start = page << PAGE_SHIFT
                    out[start:start + PAGE_SIZE] = self.saved[page]
                self.copied[first:last] = b"\x01" * (last - first)
        return out
