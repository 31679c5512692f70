"""Checkpoint and restart.

A checkpoint quiesces the guest, lets plugins pull driver-domain state
into their private stores, then serializes the launcher domain (RAM,
device backends, plugin stores, launch log) and a disk snapshot into one
``.gckp`` image.  Restart goes the other way: rebuild the launcher
domain, replay just enough of the launch log to get an empty VM shell,
and let the plugins restore and patch the driver state.

Modes:

``default``      DEFLATE-compressed RAM and device sections.
``forked``       same image, but RAM is captured under a copy-on-write
                 barrier and serialized on a background thread while
                 the guest keeps running.
``fast``         uncompressed, page-aligned RAM that restart maps and
                 faults in on demand.
``incremental``  only pages dirtied since the base image, linked to it
                 by content hash.
"""

import concurrent.futures
import hashlib
import json
import mmap
import os
import struct
import threading
import time
from pathlib import Path

from .. import fs_snapshot
from ..driver_api import AddressSpace, default_driver
from ..errors import (
    BrokenChain, CheckpointError, CorruptImage, HandlerFailed, IoFailure, MissingBase,
    NoBaseImage, PluginFailed, StaleBuffer,
)
from ..guest_vm.machine import PAGE_SHIFT, PAGE_SIZE, DiskDevice, GuestMachine
from ..plugins import (
    PluginEvent, PluginRegistry, decode_launch_log, decode_store, dispatch, encode_launch_log,
    encode_store, make_plugin,
)
from . import image as img
from .image import (
    FLAG_COMPRESSED, FLAG_DELTA, FLAG_FAST, ImageParts, Section, SectionType,
)
from .paging import CowGuard, DemandPager
from .session import Session

ENGINE_VERSION = "gckpt/1"
MODES = ("default", "forked", "fast", "incremental")
SUFFIX = ".gckp"

_MODE_FLAGS = {
    "default": FLAG_COMPRESSED,
    "forked": FLAG_COMPRESSED,
    "fast": FLAG_FAST,
    "incremental": FLAG_COMPRESSED | FLAG_DELTA,
}

# replayed on restart to obtain an empty shell; everything else is plugin business
_SHELL_OPS = ("create_vm_shell", "map_shared_region")


# -- DEVICE section ---------------------------------------------------------

_DEV_HEAD = struct.Struct("<QQB")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


def encode_device(machine):
    """mem_size u64 | instr_count u64 | halted u8 | fault str16 | console bytes64 | disk str16"""
    fault = (machine.fault or "").encode()
    disk = (machine.disk.path if machine.disk is not None else "").encode()
    return b"".join([
        _DEV_HEAD.pack(machine.mem_size, machine.instr_count, 1 if machine.halted else 0),
        _U16.pack(len(fault)), fault,
        _U64.pack(len(machine.console_out)), bytes(machine.console_out),
        _U16.pack(len(disk)), disk,
    ])


def decode_device(data):
    try:
        mem_size, instr_count, halted = _DEV_HEAD.unpack_from(data, 0)
        pos = _DEV_HEAD.size
        (n,) = _U16.unpack_from(data, pos)
        fault = bytes(data[pos + 2:pos + 2 + n]).decode()
        pos += 2 + n
        (n,) = _U64.unpack_from(data, pos)
        console = bytes(data[pos + 8:pos + 8 + n])
        pos += 8 + n
        (n,) = _U16.unpack_from(data, pos)
        disk = bytes(data[pos + 2:pos + 2 + n]).decode()
        pos += 2 + n
    except (struct.error, UnicodeDecodeError) as exc:
        raise CorruptImage(f"bad DEVICE section: {exc}", section="device") from None
    if pos != len(data):
        raise CorruptImage("trailing bytes in DEVICE section", section="device")
    return {
        "mem_size": mem_size, "instr_count": instr_count, "halted": bool(halted),
        "fault": fault or None, "console": console, "disk": disk or None,
    }


# -- DELTA_INDEX section ----------------------------------------------------

def encode_delta_index(base_hash, pages, section="ram.delta"):
    name = section.encode()
    out = bytearray(base_hash)
    out += _U32.pack(len(pages))
    for p in pages:
        out += _U32.pack(p) + _U16.pack(len(name)) + name
    return bytes(out)


def decode_delta_index(data):
    """Return ``(base_hash, [(page, section_name), ...])``."""
    try:
        base = bytes(data[:32])
        (count,) = _U32.unpack_from(data, 32)
        pos = 36
        pages = []
        for _ in range(count):
            (page,) = _U32.unpack_from(data, pos)
            (n,) = _U16.unpack_from(data, pos + 4)
            name = bytes(data[pos + 6:pos + 6 + n]).decode()
            pos += 6 + n
            pages.append((page, name))
    except (struct.error, UnicodeDecodeError) as exc:
        raise CorruptImage(f"bad DELTA_INDEX: {exc}", section="delta") from None
    if len(base) != 32 or pos != len(data):
        raise CorruptImage("DELTA_INDEX length mismatch", section="delta")
    if any(a[0] >= b[0] for a, b in zip(pages, pages[1:])):
        raise CorruptImage("DELTA_INDEX pages not strictly increasing", section="delta")
    return base, pages


# -- hashing ----------------------------------------------------------------

class ContentHasher:
    """Incremental form of :func:`image.content_hash`."""

    def __init__(self):
        self.h = hashlib.sha256()

    def add(self, type_, name, data):
        if type_ == SectionType.MANIFEST:
            return self
        n = name.encode()
        self.h.update(struct.pack("<HH", int(type_), len(n)))
        self.h.update(n)
        self.h.update(_U64.pack(len(data)))
        self.h.update(data)
        return self

    def copy(self):
        c = ContentHasher()
        c.h = self.h.copy()
        return c

    def digest(self):
        return self.h.digest()


def _image_id(prefix_digest, disk_sha):
    """Identity shared by every layout of the same captured instant."""
    return hashlib.sha256(prefix_digest + (disk_sha or b"")).hexdigest()[:16]


# -- capture ----------------------------------------------------------------

class _Capture:
    """Everything taken from the session while the guest is paused (RAM aside)."""

    def __init__(self, session, mode, base_hash):
        m = session.machine
        self.mode = mode
        self.name = session.name
        self.instr_count = m.instr_count
        self.device = encode_device(m)
        self.plugin_blobs = [(p.name, encode_store(p.private_store)) for p in session.plugins]
        self.launch_log = encode_launch_log(session.launch_log)
        self.base_hash = base_hash
        self.dirty = sorted(m.dirty_pages()) if mode == "incremental" else None
        self.disk_ref = None

    def tail_sections(self):
        out = [Section(SectionType.DEVICE, "device", self.device)]
        out += [Section(SectionType.PLUGIN_BLOB, n, b) for n, b in self.plugin_blobs]
        out.append(Section(SectionType.LAUNCH_LOG, "launch", self.launch_log))
        return out


def _default_path(dest, cap):
    dest = Path(dest)
    if dest.suffix == SUFFIX:
        return dest
    return dest / f"{cap.name}-{cap.instr_count:012d}-{cap.mode}{SUFFIX}"


def _build(cap, ram, path):
    """Lay out sections for ``cap`` and write the file.  Returns (path, content hash)."""
    tail = cap.tail_sections()
    full = ContentHasher().add(SectionType.MEMORY, "ram", ram)
    for s in tail:
        full.add(s.type, s.name, s.data)
    disk_sha = None
    if cap.disk_ref is not None:
        ref = fs_snapshot.with_digest(cap.disk_ref)
        disk_sha = ref.sha256
    image_id = _image_id(full.digest(), disk_sha)
    disk_sec = []
    if cap.disk_ref is not None:
        final = path.parent / f"{image_id}.disk"
        try:
            os.replace(ref.snapshot_path, final)
        except OSError as exc:
            raise IoFailure(f"placing disk snapshot: {exc}") from exc
        ref = fs_snapshot.SnapshotRef(final.name, ref.origin_path, ref.method, ref.sha256,
                                      ref.length)
        disk_sec = [Section(SectionType.DISK_SNAPSHOT_REF, "disk", fs_snapshot.encode_ref(ref))]

    if cap.mode == "incremental":
        delta = bytearray()
        for p in cap.dirty:
            delta += ram[p << PAGE_SHIFT:(p + 1) << PAGE_SHIFT]
        body = [Section(SectionType.DELTA_INDEX, "delta", encode_delta_index(cap.base_hash, cap.dirty)),
                Section(SectionType.MEMORY, "ram.delta", bytes(delta))]
    else:
        body = [Section(SectionType.MEMORY, "ram", ram)]
    sections = body + tail + disk_sec
    if cap.mode == "incremental":
        chash = img.content_hash(sections)
    else:
        for s in disk_sec:
            full.add(s.type, s.name, s.data)
        chash = full.digest()
    manifest = {
        "engine": ENGINE_VERSION,
        "session": cap.name,
        "instr_count": cap.instr_count,
        "timestamp": time.time(),
        "content_hash": chash.hex(),
        "image_id": image_id,
    }
    parts = ImageParts(_MODE_FLAGS[cap.mode],
                       [Section(SectionType.MANIFEST, "manifest", _manifest_bytes(manifest))]
                       + sections)
    _write_file(path, img.write_image(parts))
    return path, chash


def _manifest_bytes(manifest):
    return json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()


def _write_file(path, data):
    part = path.with_name(path.name + ".part")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(part, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(part, path)
    except OSError as exc:
        try:
            part.unlink()
        except OSError:
            pass
        raise IoFailure(f"writing {path}: {exc}") from exc


class _ChainHead:
    """The image the session's dirty bitmap is relative to."""

    def __init__(self, path, digest):
        self.path = Path(path)
        self._digest = digest

    def digest(self):
        d = self._digest
        return d.result()[1] if isinstance(d, concurrent.futures.Future) else d


def _resolve_base(session, base):
    head = session.chain_head
    if base is None:
        if head is None:
            raise NoBaseImage("no base image")
        return head.digest()
    base_hash = bytes.fromhex(read_manifest_file(base)["content_hash"])
    if head is None or head.digest() != base_hash:
        raise BrokenChain(f"{base} is not the image the dirty bitmap is relative to")
    return base_hash


def _begin(session, dest, mode, base, force_copy):
    """Quiesced part of every checkpoint: events, capture, disk snapshot."""
    if mode not in MODES:
        raise ValueError(f"unknown checkpoint mode {mode!r}")
    base_hash = _resolve_base(session, base) if mode == "incremental" else None
    try:
        dispatch(session, PluginEvent.PRE_CHECKPOINT)
    except HandlerFailed as exc:
        session.abort()
        raise PluginFailed(str(exc)) from exc
    cap = _Capture(session, mode, base_hash)
    path = _default_path(dest, cap)
    if session.machine.disk is not None:
        cap.disk_ref = fs_snapshot.snapshot_disk(session.machine.disk.path, path.parent,
                                                 force_copy=force_copy, digest=False)
    return cap, path


def checkpoint(session, dest, *, mode="default", base=None, timeout=None, force_copy=False):
    """Write a checkpoint image of ``session`` and return its path.

    ``dest`` is either a directory (a name is derived from session name,
    instruction count and mode) or a path ending in ``.gckp``.
    """
    if mode == "forked":
        return forked_checkpoint(session, dest, timeout=timeout, force_copy=force_copy).result()
    m = session.machine
    t0 = time.perf_counter()
    session.checkpoint_in_progress = True
    try:
        with session.paused(timeout):
            cap, path = _begin(session, dest, mode, base, force_copy)
            ram = m.memory
            path, chash = _build(cap, ram, path)
            m.clear_dirty()
            session.chain_head = _ChainHead(path, chash)
            dispatch(session, PluginEvent.RESUME)
            session.last_pause_seconds = time.perf_counter() - t0
    finally:
        session.checkpoint_in_progress = False
    return path


class PendingCheckpoint:
    """Handle on a forked checkpoint whose image is still being written."""

    def __init__(self, path, future, pause_seconds):
        self.path = path
        self._future = future
        self.pause_seconds = pause_seconds

    def done(self):
        return self._future.done()

    def result(self, timeout=None):
        return self._future.result(timeout)[0]


def forked_checkpoint(session, dest, *, timeout=None, force_copy=False):
    """Checkpoint with the guest paused only for capture; serialization runs in the background.

    RAM is isolated by a copy-on-write barrier: the guest may write as soon
    as this returns, and the first write to each not-yet-copied page saves
    the original first.  Pause cost is independent of RAM size.
    """
    m = session.machine
    future = concurrent.futures.Future()
    t0 = time.perf_counter()
    session.checkpoint_in_progress = True
    try:
        with session.paused(timeout):
            cap, path = _begin(session, dest, "forked", None, force_copy)
            if m._lazy is not None:
                m._lazy.materialize_all()
            guard = CowGuard(m._mem)
            m._cow = guard
            m.clear_dirty()
            session.chain_head = _ChainHead(path, future)
            dispatch(session, PluginEvent.RESUME)
            pause = time.perf_counter() - t0
            session.last_pause_seconds = pause
    finally:
        session.checkpoint_in_progress = False

    def serialize():
        try:
            ram = guard.snapshot()
            if m._cow is guard:
                m._cow = None
            future.set_result(_build(cap, ram, path))
        except BaseException as exc:
            if m._cow is guard:
                m._cow = None
            future.set_exception(exc)

    threading.Thread(target=serialize, name=f"ckpt-{session.name}", daemon=True).start()
    return PendingCheckpoint(path, future, pause)


# -- reading images ---------------------------------------------------------

def _read_bytes(path):
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"reading {path}: {exc}") from exc


def read_manifest_file(path):
    return img.read_manifest(_read_bytes(path))


def load_image(path):
    """Read and verify every section of the image at ``path``."""
    return img.read_image(_read_bytes(path))


def find_by_hash(directory, content_hash):
    """Path of the image in ``directory`` whose content hash is ``content_hash``."""
    want = content_hash.hex() if isinstance(content_hash, bytes) else content_hash
    for p in sorted(Path(directory).glob(f"*{SUFFIX}")):
        try:
            if read_manifest_file(p).get("content_hash") == want:
                return p
        except (CheckpointError, OSError):
            continue
    return None


def _as_parts(item):
    if isinstance(item, ImageParts):
        return item
    if isinstance(item, (bytes, bytearray)):
        return img.read_image(item)
    return load_image(item)


def _stored_hash(parts):
    return bytes.fromhex(parts.manifest["content_hash"])


def materialize(chain):
    """Flatten ``[base, delta1, delta2, ...]`` into one full image (``ImageParts``).

    Each delta must name the content hash of its predecessor.  The result
    is laid out exactly as a full default-mode checkpoint of the final
    instant, manifest aside.
    """
    chain = [_as_parts(c) for c in chain]
    if not chain:
        raise BrokenChain("empty chain")
    base = chain[0]
    if base.flags & FLAG_DELTA:
        raise BrokenChain("chain must start with a full image")
    ram = bytearray(base.find(SectionType.MEMORY, "ram").data)
    prev, current = base, base
    for delta in chain[1:]:
        if not delta.flags & FLAG_DELTA:
            raise BrokenChain("non-delta image inside a chain")
        idx = delta.find(SectionType.DELTA_INDEX)
        if idx is None:
            raise CorruptImage("delta image without DELTA_INDEX", section="delta")
        base_hash, pages = decode_delta_index(idx.data)
        if base_hash != _stored_hash(prev) or base_hash != img.content_hash(prev.sections):
            raise BrokenChain(f"delta names base {base_hash.hex()[:16]}, chain has "
                              f"{_stored_hash(prev).hex()[:16]}")
        blobs = {}
        for page, name in pages:
            if page >= len(ram) >> PAGE_SHIFT:
                raise CorruptImage(f"delta page {page} beyond guest memory", section=name)
            sec = blobs.get(name)
            if sec is None:
                s = delta.find(SectionType.MEMORY, name)
                if s is None:
                    raise CorruptImage(f"delta names missing section {name!r}", section=name)
                sec = blobs[name] = [s.data, 0]
            data, off = sec
            if off + PAGE_SIZE > len(data):
                raise CorruptImage(f"section {name!r} too short for its pages", section=name)
            ram[page << PAGE_SHIFT:(page + 1) << PAGE_SHIFT] = data[off:off + PAGE_SIZE]
            sec[1] = off + PAGE_SIZE
        prev = current = delta
    rest = [s for s in current.sections
            if s.type not in (SectionType.MANIFEST, SectionType.MEMORY, SectionType.DELTA_INDEX)]
    sections = [Section(SectionType.MEMORY, "ram", bytes(ram))] + rest
    manifest = dict(current.manifest)
    manifest["content_hash"] = img.content_hash(sections).hex()
    return ImageParts(FLAG_COMPRESSED,
                      [Section(SectionType.MANIFEST, "manifest", _manifest_bytes(manifest))]
                      + sections)


def _resolve_chain(path, parts, base):
    """Walk DELTA_INDEX links back to a full image."""
    chain = [parts]
    explicit = [] if base is None else ([base] if isinstance(base, (str, Path)) else list(base))
    cur = parts
    while cur.flags & FLAG_DELTA:
        base_hash, _ = decode_delta_index(cur.find(SectionType.DELTA_INDEX).data)
        found = None
        for cand in explicit:
            if _stored_hash(_as_parts(cand)) == base_hash:
                found = cand
                break
        if found is None:
            found = find_by_hash(Path(path).parent, base_hash)
        if found is None:
            raise MissingBase(f"base image {base_hash.hex()[:16]} not found")
        cur = _as_parts(found)
        chain.append(cur)
    chain.reverse()
    return chain


# -- restart ----------------------------------------------------------------

def restart(image, *, fast=False, plugins=None, disk_path=None, driver=None, base=None,
            force_copy=False, name=None):
    """Re-create a runnable session from ``image``.

    Launcher-domain state comes back byte-exact first; then the recorded
    ``create_vm_shell`` and ``map_shared_region`` calls are replayed
    against the driver to obtain an empty shell, and ``POST_RESTART`` lets
    the plugins push their saved driver state into it.  The guest is not
    stepped.

    ``fast=True`` on a fast-layout image maps the file and loads RAM pages
    on first touch.  ``plugins`` overrides the plugin list recorded in the
    image (names or instances); stores are matched by plugin name.
    """
    path = Path(image)
    pager = None
    if fast:
        mm, flags, entries = _map_image(path)
        if flags & FLAG_FAST:
            sections = []
            ram_entry = None
            for e in entries:
                if e.type == SectionType.MEMORY and e.name == "ram":
                    ram_entry = e
                    continue
                sections.append(Section(e.type, e.name, img.section_raw(mm, e, flags)))
            if ram_entry is None:
                raise CorruptImage("fast image without a ram section", section="ram")
            parts = ImageParts(flags, sections)
        else:
            mm.close()
            fast = False
    if not fast:
        parts = load_image(path)
    own_hash = _stored_hash(parts)
    if not fast:
        if parts.flags & FLAG_DELTA:
            parts = materialize(_resolve_chain(path, parts, base))

    dev = decode_device(parts.find(SectionType.DEVICE, "device").data)
    mem_size = dev["mem_size"]
    if fast:
        if ram_entry.raw_len != mem_size:
            raise CorruptImage("ram section size disagrees with DEVICE", section="ram")
        ram = mmap.mmap(-1, mem_size) if mem_size else bytearray()
        machine = GuestMachine(mem_size, ram=ram)

        def done(p):
            machine._lazy = None
            mm.close()

        pager = DemandPager(mm, ram_entry.offset, ram_entry.raw_len, ram, ram_entry.crc32,
                            section="ram", on_complete=done)
        if pager.remaining:
            machine._lazy = pager
    else:
        mem = parts.find(SectionType.MEMORY, "ram")
        if mem is None or len(mem.data) != mem_size:
            raise CorruptImage("ram section missing or wrong size", section="ram")
        machine = GuestMachine(mem_size, ram=bytearray(mem.data))
    machine.instr_count = dev["instr_count"]
    machine.halted = dev["halted"]
    machine.fault = dev["fault"]
    machine.console_out[:] = dev["console"]

    try:
        launch_log = decode_launch_log(parts.find(SectionType.LAUNCH_LOG).data)
    except (AttributeError, ValueError, KeyError, TypeError) as exc:
        raise CorruptImage(f"unreadable launch log: {exc}", section="launch") from None
    stores = {}
    for s in parts.all(SectionType.PLUGIN_BLOB):
        try:
            stores[s.name] = decode_store(s.data)
        except (ValueError, struct.error, UnicodeDecodeError) as exc:
            raise CorruptImage(f"bad plugin store: {exc}", section=s.name) from None
    if plugins is None:
        plugins = list(stores)
    registry = PluginRegistry([make_plugin(p) if isinstance(p, str) else p for p in plugins])
    for p in registry:
        if p.name in stores:
            p.private_store = dict(stores[p.name])

    space = AddressSpace()
    space.register(machine._mem, "ram")
    fd = (driver or default_driver).open(space)
    manifest = parts.manifest
    session = Session(machine, fd, space, None, registry, launch_log,
                      name=name or manifest.get("session", "vm"))

    # shell re-launch: only the calls that create driver objects
    for call in launch_log:
        if call.op not in _SHELL_OPS:
            continue
        if call.op == "create_vm_shell":
            session.vm = session.call("create_vm_shell", **call.args)
        else:
            session.call(call.op, **dict(call.args, vm=session.vm))

    if session.vm is not None:
        try:
            dispatch(session, PluginEvent.POST_RESTART)
        except HandlerFailed as exc:
            fd.destroy_vm(session.vm)
            if isinstance(exc.cause, StaleBuffer):
                raise StaleBuffer(f"plugin {exc.name!r}: {exc.cause}") from exc
            raise PluginFailed(str(exc)) from exc

    ref_sec = parts.find(SectionType.DISK_SNAPSHOT_REF)
    if ref_sec is not None:
        try:
            ref = fs_snapshot.decode_ref(ref_sec.data, dev["disk"] or "")
        except (ValueError, struct.error, UnicodeDecodeError) as exc:
            raise CorruptImage(f"bad disk snapshot ref: {exc}", section=ref_sec.name) from None
        target = disk_path or dev["disk"]
        fs_snapshot.restore_disk(ref, target, base_dir=path.parent, force_copy=force_copy)
        machine.disk = DiskDevice(target)
        session.disk_path = os.fspath(target)
    session.chain_head = _ChainHead(path, own_hash)
    return session


def _map_image(path):
    try:
        with open(path, "rb") as fh:
            size = os.fstat(fh.fileno()).st_size
            if size == 0:
                raise CorruptImage("empty image file")
            mm = mmap.mmap(fh.fileno(), 0, access=mmap.ACCESS_READ)
    except OSError as exc:
        raise IoFailure(f"mapping {path}: {exc}") from exc
    try:
        flags, entries = img.read_table(mm)
    except BaseException:
        mm.close()
        raise
    return mm, flags, entries


def verify_image(path, base=None):
    """Fully decode an image; incremental images are checked through their whole chain."""
    parts = load_image(path)
    if parts.flags & FLAG_DELTA:
        materialize(_resolve_chain(path, parts, base))
    return parts
