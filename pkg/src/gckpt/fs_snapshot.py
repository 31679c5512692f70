"""Point-in-time guest disk snapshots via copy-on-write file clones.

:func:`clone_file` tries the Linux ``FICLONE`` ioctl (what ``cp --reflink``
uses) and falls back to a byte copy when the filesystem refuses.
Support is detected by attempting the clone, never by looking at the
filesystem type.
"""

import enum
import errno
import fcntl
import hashlib
import os
import platform
import shutil
import struct
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path

from .errors import HashMismatch, IoFailure

# _IOW(0x94, 9, int); the direction bits differ on a few architectures
FICLONE = {
    "ppc64le": 0x80049409,
    "ppc64": 0x80049409,
    "mips": 0x80049409,
    "sparc64": 0x80049409,
}.get(platform.machine(), 0x40049409)

_CLONE_UNSUPPORTED = {errno.EOPNOTSUPP, errno.ENOTSUP, errno.EXDEV, errno.EINVAL,
                      errno.ENOTTY, errno.ENOSYS, errno.EBADF, errno.EPERM}

EMPTY_SHA256 = hashlib.sha256(b"").digest()


class Method(enum.IntEnum):
    REFLINK = 0
    FULL_COPY = 1


@dataclass(frozen=True)
class SnapshotRef:
    snapshot_path: str
    origin_path: str
    method: Method
    sha256: bytes
    length: int

    def resolve(self, base_dir=None):
        p = Path(self.snapshot_path)
        if not p.is_absolute() and base_dir is not None:
            p = Path(base_dir) / p
        return p


def file_sha256(path, chunk=1 << 20):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        while True:
            block = fh.read(chunk)
            if not block:
                break
            h.update(block)
    return h.digest()


def try_reflink(src, dst):
    """Clone ``src`` onto ``dst`` (created/truncated).  True on success."""
    try:
        with open(src, "rb") as s, open(dst, "wb") as d:
            fcntl.ioctl(d.fileno(), FICLONE, s.fileno())
        return True
    except OSError as exc:
        if exc.errno in _CLONE_UNSUPPORTED:
            return False
        raise


def clone_file(src, dst, *, force_copy=False):
    """Copy ``src`` to ``dst``, cloning when possible.  Returns the :class:`Method` used."""
    try:
        if not force_copy and try_reflink(src, dst):
            return Method.REFLINK
        shutil.copyfile(src, dst)
        return Method.FULL_COPY
    except OSError as exc:
        raise IoFailure(f"copying {src} -> {dst}: {exc}") from exc


def snapshot_disk(origin, dest_dir, *, name=None, force_copy=False, digest=True):
    """Create a point-in-time copy of ``origin`` under ``dest_dir``.

    With ``digest=False`` the content hash is left empty; fill it later
    with :func:`with_digest` (the snapshot file is never written again, so
    the hash still describes the captured instant).
    """
    origin = os.fspath(origin)
    if not os.path.isfile(origin):
        raise IoFailure(f"{origin}: no such disk image")
    dest_dir = Path(dest_dir)
    dest_dir.mkdir(parents=True, exist_ok=True)
    if name is None:
        fd, tmp = tempfile.mkstemp(prefix=".snap-", suffix=".disk", dir=dest_dir)
        os.close(fd)
        path = Path(tmp)
    else:
        path = dest_dir / name
    method = clone_file(origin, path, force_copy=force_copy)
    ref = SnapshotRef(str(path), origin, method, b"", os.path.getsize(path))
    return with_digest(ref) if digest else ref


def with_digest(ref):
    try:
        return replace(ref, sha256=file_sha256(ref.snapshot_path))
    except OSError as exc:
        raise IoFailure(f"hashing {ref.snapshot_path}: {exc}") from exc


def restore_disk(ref, target, *, base_dir=None, force_copy=False):
    """Make ``target`` byte-identical to the snapshot ``ref`` describes."""
    src = ref.resolve(base_dir)
    try:
        actual = file_sha256(src)
    except OSError as exc:
        raise IoFailure(f"reading snapshot {src}: {exc}") from exc
    if actual != ref.sha256:
        raise HashMismatch(f"{src}: sha256 {actual.hex()} != recorded {ref.sha256.hex()}")
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".restore-", dir=target.parent)
    os.close(fd)
    try:
        clone_file(src, tmp, force_copy=force_copy)
        os.replace(tmp, target)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def delete_snapshot(ref, base_dir=None):
    p = ref.resolve(base_dir)
    if p.exists():
        p.unlink()


# DISK_SNAPSHOT_REF section: path (u16 length + UTF-8), method u8, sha256, length u64
_HDR = struct.Struct("<H")
_TAIL = struct.Struct("<B32sQ")


def encode_ref(ref):
    path = ref.snapshot_path.encode()
    return _HDR.pack(len(path)) + path + _TAIL.pack(int(ref.method), ref.sha256, ref.length)


def decode_ref(data, origin_path=""):
    (n,) = _HDR.unpack_from(data, 0)
    if len(data) != _HDR.size + n + _TAIL.size:
        raise ValueError("bad DISK_SNAPSHOT_REF length")
    path = bytes(data[_HDR.size:_HDR.size + n]).decode()
    method, sha, length = _TAIL.unpack_from(data, _HDR.size + n)
    return SnapshotRef(path, origin_path, Method(method), sha, length)
