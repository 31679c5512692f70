import json
import struct
import zlib
from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from gckpt.ckpt_engine import engine, image as img
from gckpt.ckpt_engine.image import (
    FLAG_COMPRESSED, FLAG_DELTA, FLAG_FAST, ImageParts, Section, SectionType, read_image,
    read_table, write_image,
)
from gckpt.ckpt_engine.session import Session
from gckpt.driver_api import Driver
from gckpt.errors import CorruptImage
from gckpt.guest_vm import programs

from oracles import crc32_bitwise, deflate_zero_bound, inflate_reference

FIX = Path(__file__).parent / "fixtures"
ORACLE = json.loads((FIX / "oracle_values.json").read_text())


# -- frozen oracle values -----------------------------------------------------------

def test_crc_oracle_check_value():
    assert ORACLE["crc32_check_123456789"] == 0xCBF43926
    assert crc32_bitwise(b"123456789") == 0xCBF43926


def test_codec_crc_matches_bitwise_oracle():
    parts = ImageParts(0, [Section(SectionType.MANIFEST, "m", b"{}"),
                           Section(SectionType.DEVICE, "d", b"123456789")])
    entries = read_table(write_image(parts))[1]
    assert entries[1].crc32 == 0xCBF43926


@settings(max_examples=200)
@given(st.binary(max_size=2000))
def test_crc_agrees_with_oracle(data):
    parts = ImageParts(0, [Section(SectionType.MANIFEST, "m", b"{}"),
                           Section(SectionType.LAUNCH_LOG, "x", data)])
    assert read_table(write_image(parts))[1][1].crc32 == crc32_bitwise(data)


def test_zero_deflate_bound_oracle():
    bound = ORACLE["deflate_zero_bound_1MiB"]
    assert bound == deflate_zero_bound(1 << 20)
    assert bound < (1 << 20) // 100


# -- codec ----------------------------------------------------------------------------

_types = st.sampled_from(list(SectionType))
_sections = st.lists(st.tuples(_types, st.text(max_size=12), st.binary(max_size=3000)),
                     max_size=6)


@st.composite
def parts_strategy(draw):
    flags = draw(st.sampled_from([0, FLAG_COMPRESSED, FLAG_FAST, FLAG_COMPRESSED | FLAG_DELTA,
                                  FLAG_DELTA]))
    secs = [Section(SectionType.MANIFEST, "manifest", b'{"x":1}')]
    secs += [Section(t, n, d) for t, n, d in draw(_sections) if t != SectionType.MANIFEST]
    return ImageParts(flags, secs)


@settings(max_examples=200, deadline=None)
@given(parts_strategy())
def test_read_write_round_trip(parts):
    data = write_image(parts)
    back = read_image(data)
    assert back == parts
    assert write_image(back) == data


@settings(max_examples=100, deadline=None)
@given(parts_strategy())
def test_layout_invariants(parts):
    data = write_image(parts)
    flags, entries = read_table(data)
    spans = sorted((e.offset, e.offset + e.stored_len) for e in entries)
    for (a0, a1), (b0, b1) in zip(spans, spans[1:]):
        assert a1 <= b0
    assert all(0 <= lo <= hi <= len(data) for lo, hi in spans)
    for e in entries:
        if flags & FLAG_FAST and e.type == SectionType.MEMORY:
            assert e.offset % 4096 == 0
            assert e.stored_len == e.raw_len


def test_header_bit_exact():
    parts = ImageParts(FLAG_COMPRESSED, [Section(SectionType.MANIFEST, "m", b"{}")])
    data = write_image(parts)
    assert data[:16] == b"GCKP" + struct.pack("<III", 1, FLAG_COMPRESSED, 1)
    # entry: type u16, name_len u16, name, offset/stored/raw u64, crc u32
    t, n = struct.unpack_from("<HH", data, 16)
    assert (t, n) == (1, 1) and data[20:21] == b"m"
    off, stored, raw, crc = struct.unpack_from("<QQQI", data, 21)
    assert (stored, raw, crc) == (2, 2, crc32_bitwise(b"{}"))
    assert data[off:off + 2] == b"{}"


def test_compressed_sections_are_rfc1951_raw_streams():
    """Stored payloads decode with an independent inflater."""
    payload = (b"abc" * 500) + bytes(range(256)) * 3
    parts = ImageParts(FLAG_COMPRESSED, [Section(SectionType.MANIFEST, "m", b"{}"),
                                         Section(SectionType.MEMORY, "ram", payload),
                                         Section(SectionType.DEVICE, "device", bytes(300))])
    data = write_image(parts)
    _, entries = read_table(data)
    for e, want in zip(entries[1:], (payload, bytes(300))):
        stored = data[e.offset:e.offset + e.stored_len]
        assert e.stored_len < e.raw_len
        assert inflate_reference(stored) == want


@settings(max_examples=40, deadline=None)
@given(st.binary(max_size=5000))
def test_compression_lossless_by_two_decoders(x):
    d = img.deflate(x)
    assert img.inflate(d) == x
    assert inflate_reference(d) == x


def test_only_memory_and_device_compressed():
    parts = ImageParts(FLAG_COMPRESSED, [
        Section(SectionType.MANIFEST, "m", bytes(1000)),
        Section(SectionType.PLUGIN_BLOB, "p", bytes(1000)),
        Section(SectionType.MEMORY, "ram", bytes(1000))])
    _, entries = read_table(write_image(parts))
    assert [e.stored_len == e.raw_len for e in entries] == [True, True, False]


def test_fast_and_compressed_exclusive():
    with pytest.raises(ValueError):
        write_image(ImageParts(FLAG_FAST | FLAG_COMPRESSED, []))


# -- corruption -----------------------------------------------------------------------

def _sample():
    return write_image(ImageParts(FLAG_COMPRESSED, [
        Section(SectionType.MANIFEST, "manifest", b'{"content_hash":"00"}'),
        Section(SectionType.MEMORY, "ram", bytes(8192)),
        Section(SectionType.PLUGIN_BLOB, "vmdriver", b"store-bytes")]))


def test_flip_payload_byte_names_section():
    data = bytearray(_sample())
    _, entries = read_table(bytes(data))
    e = entries[2]
    data[e.offset + 3] ^= 0x01
    with pytest.raises(CorruptImage) as ei:
        read_image(bytes(data))
    assert ei.value.section == "vmdriver"
    assert ei.value.expected == e.crc32
    assert ei.value.actual != e.crc32
    assert "vmdriver" in str(ei.value)


def test_flip_compressed_byte():
    data = bytearray(_sample())
    _, entries = read_table(bytes(data))
    e = entries[1]
    data[e.offset + e.stored_len // 2] ^= 0x40
    with pytest.raises(CorruptImage) as ei:
        read_image(bytes(data))
    assert ei.value.section == "ram"


@pytest.mark.parametrize("mutate", [
    lambda d: b"GCKQ" + d[4:],
    lambda d: d[:4] + struct.pack("<I", 2) + d[8:],
    lambda d: d[:12] + struct.pack("<I", 99) + d[16:],
    lambda d: d[:10],
    lambda d: d[:-1],
    lambda d: b"",
])
def test_structural_corruption(mutate):
    with pytest.raises(CorruptImage):
        read_image(mutate(_sample()))


def test_missing_manifest():
    data = write_image(ImageParts(0, [Section(SectionType.DEVICE, "d", b"x")]))
    with pytest.raises(CorruptImage):
        read_image(data)


def test_two_manifests():
    data = write_image(ImageParts(0, [Section(SectionType.MANIFEST, "a", b"{}"),
                                      Section(SectionType.MANIFEST, "b", b"{}")]))
    with pytest.raises(CorruptImage):
        read_image(data)


# -- golden fixtures -------------------------------------------------------------------

GOLDEN = sorted(FIX.glob("golden_*.gckp"))


def test_golden_files_present():
    assert {p.name for p in GOLDEN} == set(ORACLE["golden_sha256"])


@pytest.mark.parametrize("path", GOLDEN, ids=lambda p: p.name)
def test_golden_round_trip_bit_exact(path):
    data = path.read_bytes()
    assert read_image(write_image(read_image(data))) == read_image(data)
    assert write_image(read_image(data)) == data


def test_golden_restart_reproduces_frozen_run():
    want = ORACLE["golden_final"]
    s = engine.restart(FIX / "golden_default.gckp", driver=Driver())
    s.run_to_halt()
    assert s.machine.console_out.hex() == want["console_hex"]
    assert s.machine.instr_count == want["instr_count"]
    import hashlib
    assert hashlib.sha256(bytes(s.machine.memory)).hexdigest() == want["memory_sha256"]


def test_golden_delta_resolves_to_default(tmp_path):
    full = engine.materialize([FIX / "golden_default.gckp", FIX / "golden_delta.gckp"])
    fast = read_image((FIX / "golden_fast.gckp").read_bytes())
    assert full.find(SectionType.MEMORY, "ram").data == fast.find(SectionType.MEMORY, "ram").data


# -- real checkpoints -------------------------------------------------------------------

def test_halted_one_page_default_image(tmp_path):
    s = Session.launch(programs.halt_only(), 4096, driver=Driver())
    s.run(1)
    p = engine.checkpoint(s, tmp_path)
    data = p.read_bytes()
    flags, entries = read_table(data)
    assert flags & FLAG_COMPRESSED
    assert any(e.type == SectionType.MEMORY for e in entries)
    read_image(data)  # every CRC verifies


def test_zero_memory_compresses_below_oracle_bound(tmp_path):
    s = Session.launch(programs.halt_only(), 1 << 20, driver=Driver())
    p = engine.checkpoint(s, tmp_path)
    _, entries = read_table(p.read_bytes())
    mem = [e for e in entries if e.type == SectionType.MEMORY]
    stored = sum(e.stored_len for e in mem)
    raw = sum(e.raw_len for e in mem)
    assert raw == 1 << 20
    assert stored < raw / 100
    # the program's one nonzero instruction costs a few bytes over the all-zero bound
    assert stored <= ORACLE["deflate_zero_bound_1MiB"] + 64


def test_content_hash_excludes_manifest():
    a = [Section(SectionType.MANIFEST, "m", b"1"), Section(SectionType.DEVICE, "d", b"x")]
    b = [Section(SectionType.MANIFEST, "m", b"2"), Section(SectionType.DEVICE, "d", b"x")]
    assert img.content_hash(a) == img.content_hash(b)
    assert img.content_hash(a) != img.content_hash([a[0], Section(SectionType.DEVICE, "d", b"y")])


def test_inflate_rejects_trailing_data():
    with pytest.raises(zlib.error):
        img.inflate(img.deflate(b"abc") + b"junk")
