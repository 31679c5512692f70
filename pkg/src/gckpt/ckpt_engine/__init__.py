"""Checkpoint/restart engine: image container, sessions, the four checkpoint modes."""

from .engine import (
    MODES, ContentHasher, PendingCheckpoint, checkpoint, decode_delta_index, decode_device,
    encode_delta_index, encode_device, find_by_hash, forked_checkpoint, load_image,
    materialize, read_manifest_file, restart, verify_image,
)
from .image import (
    FLAG_COMPRESSED, FLAG_DELTA, FLAG_FAST, ImageParts, Section, SectionType, content_hash,
    read_image, read_manifest, read_table, write_image,
)
from .session import RUN_REGION_KEY, Session, launch

__all__ = [
    "FLAG_COMPRESSED", "FLAG_DELTA", "FLAG_FAST", "MODES", "RUN_REGION_KEY", "ContentHasher",
    "ImageParts", "PendingCheckpoint", "Section", "SectionType", "Session", "checkpoint",
    "content_hash", "decode_delta_index", "decode_device", "encode_delta_index",
    "encode_device", "find_by_hash", "forked_checkpoint", "launch", "load_image",
    "materialize", "read_image", "read_manifest", "read_manifest_file", "read_table",
    "restart", "verify_image", "write_image",
]
