"""The ``.gckp`` sectioned image container.

Layout (all integers little-endian)::

    header   magic "GCKP" | version u32 | flags u32 | section_count u32
    table    per section: type u16 | name_len u16 | name (UTF-8)
                          | offset u64 | stored_len u64 | raw_len u64 | crc32 u32
    payload  sections at their table offsets

Flag bit 0 means MEMORY and DEVICE payloads are raw DEFLATE streams;
bit 1 marks the fast-restart layout (uncompressed MEMORY sections on
4096-byte file offsets, suitable for mmap); bit 2 marks an incremental
delta image.  CRC-32 is taken over the *raw* (decompressed) payload.
"""

import enum
import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field

from ..errors import CorruptImage

MAGIC = b"GCKP"
VERSION = 1

FLAG_COMPRESSED = 1 << 0
FLAG_FAST = 1 << 1
FLAG_DELTA = 1 << 2

ALIGN = 4096
DEFLATE_LEVEL = 6
MAX_RAW_LEN = 1 << 40

_HEADER = struct.Struct("<4sIII")
_ENTRY_HEAD = struct.Struct("<HH")
_ENTRY_TAIL = struct.Struct("<QQQI")


class SectionType(enum.IntEnum):
    MANIFEST = 1
    MEMORY = 2
    DEVICE = 3
    PLUGIN_BLOB = 4
    LAUNCH_LOG = 5
    DISK_SNAPSHOT_REF = 6
    DELTA_INDEX = 7


COMPRESSIBLE = (SectionType.MEMORY, SectionType.DEVICE)


@dataclass
class Section:
    type: SectionType
    name: str
    data: bytes


@dataclass
class ImageParts:
    flags: int
    sections: list = field(default_factory=list)

    def find(self, type_, name=None):
        for s in self.sections:
            if s.type == type_ and (name is None or s.name == name):
                return s
        return None

    def all(self, type_):
        return [s for s in self.sections if s.type == type_]

    @property
    def manifest(self):
        return json.loads(self.find(SectionType.MANIFEST).data.decode())


@dataclass(frozen=True)
class TableEntry:
    type: SectionType
    name: str
    offset: int
    stored_len: int
    raw_len: int
    crc32: int


def deflate(data, level=DEFLATE_LEVEL):
    c = zlib.compressobj(level, zlib.DEFLATED, -15)
    return c.compress(data) + c.flush()


def inflate(data, raw_len=None):
    d = zlib.decompressobj(-15)
    if raw_len is None:
        out = d.decompress(data) + d.flush()
    else:
        out = d.decompress(data, raw_len + 1)
    if not d.eof or d.unconsumed_tail or d.unused_data:
        raise zlib.error("DEFLATE stream is truncated or has trailing data")
    return out


def _compressed(flags, type_):
    return bool(flags & FLAG_COMPRESSED) and type_ in COMPRESSIBLE


def _aligned(flags, type_):
    return bool(flags & FLAG_FAST) and type_ == SectionType.MEMORY


def content_hash(sections):
    """SHA-256 over every non-MANIFEST section, in order, framed by type/name/length."""
    h = hashlib.sha256()
    for s in sections:
        if s.type == SectionType.MANIFEST:
            continue
        name = s.name.encode()
        h.update(struct.pack("<HH", int(s.type), len(name)))
        h.update(name)
        h.update(struct.pack("<Q", len(s.data)))
        h.update(s.data)
    return h.digest()


def write_image(parts, *, stored=None):
    """Serialize ``parts``.  ``stored`` may supply pre-compressed payloads by index."""
    flags = parts.flags
    if flags & FLAG_FAST and flags & FLAG_COMPRESSED:
        raise ValueError("fast-restart layout is never compressed")
    payloads = []
    for i, s in enumerate(parts.sections):
        if stored is not None and i in stored:
            payloads.append(stored[i])
        elif _compressed(flags, s.type):
            payloads.append(deflate(s.data))
        else:
            payloads.append(s.data)
    names = [s.name.encode() for s in parts.sections]
    table_len = _HEADER.size + sum(_ENTRY_HEAD.size + len(n) + _ENTRY_TAIL.size for n in names)
    offsets = []
    pos = table_len
    for s, p in zip(parts.sections, payloads):
        if _aligned(flags, s.type):
            pos = -(-pos // ALIGN) * ALIGN
        offsets.append(pos)
        pos += len(p)
    out = bytearray(pos)
    _HEADER.pack_into(out, 0, MAGIC, VERSION, flags, len(parts.sections))
    t = _HEADER.size
    for s, n, off, p in zip(parts.sections, names, offsets, payloads):
        _ENTRY_HEAD.pack_into(out, t, int(s.type), len(n))
        t += _ENTRY_HEAD.size
        out[t:t + len(n)] = n
        t += len(n)
        _ENTRY_TAIL.pack_into(out, t, off, len(p), len(s.data), zlib.crc32(s.data))
        t += _ENTRY_TAIL.size
        out[off:off + len(p)] = p
    return bytes(out)


def read_table(data):
    """Parse and sanity-check header and section table; payloads are not touched."""
    size = len(data)
    if size < _HEADER.size:
        raise CorruptImage("file shorter than header")
    magic, version, flags, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CorruptImage(f"bad magic {bytes(magic)!r}")
    if version != VERSION:
        raise CorruptImage(f"unsupported version {version}")
    if flags & ~(FLAG_COMPRESSED | FLAG_FAST | FLAG_DELTA):
        raise CorruptImage(f"unknown flag bits {flags:#x}")
    if flags & FLAG_FAST and flags & FLAG_COMPRESSED:
        raise CorruptImage("fast-restart image claims compression")
    min_entry = _ENTRY_HEAD.size + _ENTRY_TAIL.size
    if count > (size - _HEADER.size) // min_entry:
        raise CorruptImage(f"section count {count} cannot fit in {size} bytes")
    entries = []
    t = _HEADER.size
    for _ in range(count):
        if t + _ENTRY_HEAD.size > size:
            raise CorruptImage("section table truncated")
        type_, name_len = _ENTRY_HEAD.unpack_from(data, t)
        t += _ENTRY_HEAD.size
        if t + name_len + _ENTRY_TAIL.size > size:
            raise CorruptImage("section table truncated")
        try:
            name = bytes(data[t:t + name_len]).decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptImage("section name is not UTF-8") from None
        t += name_len
        offset, stored_len, raw_len, crc = _ENTRY_TAIL.unpack_from(data, t)
        t += _ENTRY_TAIL.size
        try:
            type_ = SectionType(type_)
        except ValueError:
            raise CorruptImage(f"unknown section type {type_}", section=name) from None
        if raw_len > MAX_RAW_LEN:
            raise CorruptImage(f"implausible raw length {raw_len}", section=name)
        if not _compressed(flags, type_) and stored_len != raw_len:
            raise CorruptImage("stored and raw lengths differ on an uncompressed section",
                               section=name)
        if _aligned(flags, type_) and offset % ALIGN:
            raise CorruptImage("fast-layout MEMORY section is not page aligned", section=name)
        entries.append(TableEntry(type_, name, offset, stored_len, raw_len, crc))
    table_end = t
    spans = sorted((e.offset, e.offset + e.stored_len, e.name) for e in entries)
    prev_end = table_end
    for start, end, name in spans:
        if start < prev_end or end > size:
            raise CorruptImage("section offsets overlap or run past end of file", section=name)
        prev_end = end
    if sum(e.type == SectionType.MANIFEST for e in entries) != 1:
        raise CorruptImage("image must contain exactly one MANIFEST section")
    return flags, entries


def section_raw(data, entry, flags, *, verify=True):
    stored = data[entry.offset:entry.offset + entry.stored_len]
    if _compressed(flags, entry.type):
        try:
            raw = inflate(stored, entry.raw_len)
        except zlib.error as exc:
            raise CorruptImage(f"section {entry.name!r}: {exc}", section=entry.name) from None
    else:
        raw = bytes(stored)
    if len(raw) != entry.raw_len:
        raise CorruptImage(f"section {entry.name!r}: inflated to {len(raw)} bytes, expected "
                           f"{entry.raw_len}", section=entry.name)
    if verify:
        actual = zlib.crc32(raw)
        if actual != entry.crc32:
            raise CorruptImage(
                f"section {entry.name!r}: crc32 {actual:#010x} != expected {entry.crc32:#010x}",
                section=entry.name, expected=entry.crc32, actual=actual)
    return raw


def read_image(data):
    """Decode and fully verify an image; inverse of :func:`write_image`."""
    flags, entries = read_table(data)
    sections = [Section(e.type, e.name, section_raw(data, e, flags)) for e in entries]
    parts = ImageParts(flags, sections)
    try:
        manifest = parts.manifest
        if not isinstance(manifest, dict):
            raise ValueError("manifest is not an object")
    except (ValueError, UnicodeDecodeError) as exc:
        raise CorruptImage(f"unreadable manifest: {exc}", section="manifest") from None
    return parts


def read_manifest(data):
    """Manifest of an image without decoding its other sections."""
    flags, entries = read_table(data)
    entry = next(e for e in entries if e.type == SectionType.MANIFEST)
    try:
        return json.loads(section_raw(data, entry, flags).decode())
    except (ValueError, UnicodeDecodeError) as exc:
        raise CorruptImage(f"unreadable manifest: {exc}", section=entry.name) from None
