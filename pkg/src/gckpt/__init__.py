"""Plugin-based checkpoint/restart for a deterministic sandbox VM.

Subpackages and modules:

- :mod:`gckpt.guest_vm`: the guest machine, its ISA and sample programs
- :mod:`gckpt.driver_api`: the kernel-driver stand-in holding vCPU/IRQ/timer/slot state
- :mod:`gckpt.plugins`: call interposition and checkpoint lifecycle events
- :mod:`gckpt.ckpt_engine`: sessions, the ``.gckp`` image format, checkpoint and restart
- :mod:`gckpt.fs_snapshot`: reflink-or-copy disk snapshots
- :mod:`gckpt.coordinator`: consistent snapshots of message-passing guest clusters
"""

from .ckpt_engine import (
    Session, checkpoint, forked_checkpoint, launch, materialize, read_image, restart,
    write_image,
)
from .errors import GckptError

__version__ = "0.1.0"

__all__ = [
    "GckptError", "Session", "checkpoint", "forked_checkpoint", "launch", "materialize",
    "read_image", "restart", "write_image",
]
