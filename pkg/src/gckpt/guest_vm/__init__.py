from . import isa
from .machine import (
    PAGE_SIZE, SECTOR_SIZE, DiskDevice, GuestMachine, GuestProgram, StepOutcome,
    StopReason, clear_dirty, dirty_pages, load_program, request_quiesce, step,
)

__all__ = [
    "isa", "PAGE_SIZE", "SECTOR_SIZE", "DiskDevice", "GuestMachine", "GuestProgram",
    "StepOutcome", "StopReason", "clear_dirty", "dirty_pages", "load_program",
    "request_quiesce", "step",
]
