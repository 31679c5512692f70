"""Launcher-side guest machine and the deterministic execution loop.

The machine owns guest RAM, the dirty-page bitmap, the console log and
the disk backend.  Registers, interrupt and timer state live in the
driver (see :mod:`gckpt.driver_api`); :func:`step` receives the driver's
per-VM state object and mutates it in place.
"""

import enum
import os
from dataclasses import dataclass

from ..errors import BadDisk, BadProgram, MachineHalted, OutOfRange
from . import isa

PAGE_SIZE = 4096
PAGE_SHIFT = 12
SECTOR_SIZE = 512

M64 = isa.MASK64


class StopReason(str, enum.Enum):
    BUDGET_EXHAUSTED = "budget_exhausted"
    HALTED = "halted"
    QUIESCE_REQUESTED = "quiesce_requested"
    FAULT = "fault"


@dataclass(frozen=True)
class StepOutcome:
    steps_executed: int
    reason: StopReason


@dataclass(frozen=True)
class GuestProgram:
    code: bytes
    entry_point: int = 0

    def __post_init__(self):
        if len(self.code) % isa.INSN_SIZE:
            raise BadProgram(f"code length {len(self.code)} is not a multiple of 8")
        if self.entry_point % isa.INSN_SIZE:
            raise BadProgram(f"entry point {self.entry_point:#x} is not 8-aligned")

    @classmethod
    def from_file(cls, path):
        with open(path, "rb") as fh:
            return cls(fh.read())


class DiskDevice:
    """Host-file-backed block device with 512-byte sectors."""

    def __init__(self, path):
        self.path = os.fspath(path)
        size = os.path.getsize(self.path)
        if size % SECTOR_SIZE:
            raise BadDisk(f"{self.path}: size {size} is not a multiple of {SECTOR_SIZE}")
        self.sectors = size // SECTOR_SIZE
        self._fd = os.open(self.path, os.O_RDWR)

    def read(self, sector, count):
        self._check(sector, count)
        data = os.pread(self._fd, count * SECTOR_SIZE, sector * SECTOR_SIZE)
        if len(data) != count * SECTOR_SIZE:
            raise BadDisk("short read")
        return data

    def write(self, sector, data):
        count = len(data) // SECTOR_SIZE
        self._check(sector, count)
        os.pwrite(self._fd, data, sector * SECTOR_SIZE)

    def _check(self, sector, count):
        if count <= 0 or sector < 0 or sector + count > self.sectors:
            raise _Fault(f"disk access sectors [{sector}, {sector + count}) out of range")

    def contents(self):
        return os.pread(self._fd, self.sectors * SECTOR_SIZE, 0)

    def close(self):
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass


class _Fault(Exception):
    pass


class GuestMachine:
    """Guest RAM plus launcher-side devices.

    ``memory`` returns the live RAM buffer, first pulling in any pages a
    fast restart has not materialized yet.  The interpreter touches
    ``_mem`` directly and faults pages in one at a time.
    """

    def __init__(self, mem_size, *, disk=None, ram=None):
        if mem_size <= 0 or mem_size % PAGE_SIZE:
            raise BadProgram(f"mem_size {mem_size} is not a positive multiple of {PAGE_SIZE}")
        self.mem_size = mem_size
        self.npages = mem_size // PAGE_SIZE
        self._mem = bytearray(mem_size) if ram is None else ram
        self._dirty = bytearray((self.npages + 7) // 8)
        self.instr_count = 0
        self.console_out = bytearray()
        self.disk = disk
        self.halted = False
        self.fault = None
        self.net = None  # set by the coordinator
        self._quiesce = False
        self.quiesce_observed_at = None
        self._icache = {}
        self._code_pages = set()
        self._lazy = None   # demand pager after fast restart
        self._cow = None    # write barrier during forked checkpoint

    # -- memory views -------------------------------------------------------

    @property
    def memory(self):
        if self._lazy is not None:
            self._lazy.materialize_all()
        return self._mem

    @property
    def pages_materialized(self):
        """Pages faulted in by the demand pager; ``npages`` for ordinary restarts."""
        pager = self._lazy
        return self.npages if pager is None else pager.faults

    # -- dirty tracking -----------------------------------------------------

    @property
    def dirty_bitmap(self):
        return bytes(self._dirty)

    def dirty_pages(self):
        out = set()
        for i, byte in enumerate(self._dirty):
            if byte:
                for bit in range(8):
                    if byte >> bit & 1:
                        out.add(i * 8 + bit)
        return out

    def clear_dirty(self):
        self._dirty[:] = bytes(len(self._dirty))

    def mark_dirty(self, lo, hi):
        for p in range(lo, hi):
            self._dirty[p >> 3] |= 1 << (p & 7)

    # -- control ------------------------------------------------------------

    def request_quiesce(self):
        """Ask the execution loop to stop at the next instruction boundary.

        Safe to call from any thread.  A no-op on a halted machine.
        """
        if not self.halted:
            self._quiesce = True

    def cancel_quiesce(self):
        self._quiesce = False

    def console_text(self, errors="replace"):
        return self.console_out.decode("utf-8", errors)


def load_program(program, mem_size, *, disk=None):
    """Build a fresh machine with ``program`` copied to guest address 0."""
    if isinstance(program, GuestProgram):
        code = program.code
    else:
        code = bytes(program)
        if len(code) % isa.INSN_SIZE:
            raise BadProgram(f"code length {len(code)} is not a multiple of 8")
    if mem_size <= 0 or mem_size % PAGE_SIZE:
        raise BadProgram(f"mem_size {mem_size} is not a positive multiple of {PAGE_SIZE}")
    if len(code) > mem_size:
        raise OutOfRange(f"program of {len(code)} bytes does not fit in {mem_size} bytes")
    if disk is not None and not isinstance(disk, DiskDevice):
        disk = DiskDevice(disk)
    machine = GuestMachine(mem_size, disk=disk)
    machine._mem[:len(code)] = code
    return machine


def dirty_pages(machine):
    return machine.dirty_pages()


def clear_dirty(machine):
    machine.clear_dirty()


def request_quiesce(machine):
    machine.request_quiesce()


# -- execution --------------------------------------------------------------

def _resolve(regions, addr, n):
    for base, end, buf in regions:
        if base <= addr and addr + n <= end:
            return buf, addr - base
    raise _Fault(f"address {addr:#x}+{n} not backed by any memory slot")


def _prepare_write(machine, buf, off, n):
    """Fault in, copy-on-write preserve and dirty every RAM page in range."""
    if buf is not machine._mem:
        return
    lo = off >> PAGE_SHIFT
    hi = (off + n - 1 >> PAGE_SHIFT) + 1
    if machine._lazy is not None:
        machine._lazy.ensure_range(lo, hi)
    if machine._cow is not None:
        for p in range(lo, hi):
            machine._cow.before_write(p)
    dirty = machine._dirty
    for p in range(lo, hi):
        dirty[p >> 3] |= 1 << (p & 7)
    if machine._code_pages and not machine._code_pages.isdisjoint(range(lo, hi)):
        machine._icache.clear()
        machine._code_pages.clear()


def _read_range(machine, regions, addr, n):
    buf, off = _resolve(regions, addr, n)
    if buf is machine._mem and machine._lazy is not None:
        machine._lazy.ensure_range(off >> PAGE_SHIFT, (off + n - 1 >> PAGE_SHIFT) + 1)
    return bytes(buf[off:off + n])


def _write_range(machine, regions, addr, data):
    buf, off = _resolve(regions, addr, len(data))
    _prepare_write(machine, buf, off, len(data))
    buf[off:off + len(data)] = data


def _hypercall(machine, cpu, regs, sub_op):
    regions = cpu.regions
    if sub_op == isa.HC_YIELD:
        live = cpu.irq_pending & ~cpu.irq_mask & 0xFFFFFFFF
        if live:
            line = (live & -live).bit_length() - 1
            cpu.irq_pending &= ~(1 << line)
            cpu.acked += 1
            regs[0] = line
        else:
            regs[0] = isa.NONE
    elif sub_op == isa.HC_GET_VTIME:
        regs[0] = machine.instr_count
    elif sub_op == isa.HC_CONSOLE_WRITE:
        n = regs[2]
        if n:
            machine.console_out += _read_range(machine, regions, regs[1], n)
        regs[0] = n
    elif sub_op in (isa.HC_DISK_READ, isa.HC_DISK_WRITE):
        disk = machine.disk
        if disk is None:
            raise _Fault("no disk attached")
        addr, sector, count = regs[1], regs[2], regs[3]
        if count <= 0 or count > (1 << 20):
            raise _Fault(f"bad sector count {count}")
        if sub_op == isa.HC_DISK_READ:
            _write_range(machine, regions, addr, disk.read(sector, count))
        else:
            data = _read_range(machine, regions, addr, count * SECTOR_SIZE)
            disk.write(sector, data)
        regs[0] = 0
    elif sub_op == isa.HC_SEND:
        if machine.net is None:
            raise _Fault("no network ports attached")
        data = _read_range(machine, regions, regs[2], regs[3])
        try:
            machine.net.send(regs[1], data)
        except IndexError as exc:
            raise _Fault(str(exc)) from None
        regs[0] = len(data)
    elif sub_op == isa.HC_RECV:
        if machine.net is None:
            raise _Fault("no network ports attached")
        try:
            msg = machine.net.recv(regs[1])
        except IndexError as exc:
            raise _Fault(str(exc)) from None
        if msg is None:
            regs[0] = isa.NONE
        else:
            msg = msg[:regs[3]]
            if msg:
                _write_range(machine, regions, regs[2], msg)
            regs[0] = len(msg)
    else:
        raise _Fault(f"unknown hypercall {sub_op}")


def step(machine, cpu, budget):
    """Execute up to ``budget`` instructions.

    ``cpu`` is the driver-side VM state (registers, pc, IRQ chip, timer and
    the resolved memory-slot table).  Every instruction boundary is a safe
    point; hypercalls complete atomically.
    """
    if machine.halted:
        raise MachineHalted("machine is halted")
    if budget <= 0:
        return StepOutcome(0, StopReason.BUDGET_EXHAUSTED)

    regs = cpu.regs
    pc = cpu.pc
    icount = machine.instr_count
    pending = cpu.irq_pending
    period = cpu.pit_period if cpu.pit_enabled else 0
    pit_bit = 1 << cpu.pit_line
    regions = cpu.regions
    mem = machine._mem
    if len(regions) == 1:
        base0, end0, buf0 = regions[0]
    else:
        base0 = end0 = 0
        buf0 = None
    dirty = machine._dirty
    icache = machine._icache
    code_pages = machine._code_pages
    lazy = machine._lazy
    cow = machine._cow
    unpack = isa.INSN.unpack_from

    n = 0
    ipc = pc
    reason = StopReason.BUDGET_EXHAUSTED
    try:
        while n < budget:
            if machine._quiesce:
                machine._quiesce = False
                machine.quiesce_observed_at = icount
                reason = StopReason.QUIESCE_REQUESTED
                break
            if period and icount % period == 0:
                pending |= pit_bit
            ipc = pc
            ins = icache.get(pc)
            if ins is None:
                if pc & 7:
                    raise _Fault(f"unaligned pc {pc:#x}")
                if base0 <= pc and pc + 8 <= end0:
                    buf, off = buf0, pc - base0
                else:
                    buf, off = _resolve(regions, pc, 8)
                if buf is mem:
                    if lazy is not None:
                        lazy.ensure(off >> PAGE_SHIFT)
                    ins = unpack(mem, off)
                    icache[pc] = ins
                    code_pages.add(off >> PAGE_SHIFT)
                else:
                    ins = unpack(buf, off)
            op, a, b, c, imm = ins
            pc += 8
            if op == 0x03:  # ADD
                regs[a] = (regs[b] + regs[c] + imm) & M64
            elif op == 0x09:  # JNZ
                if regs[a]:
                    pc = imm
            elif op == 0x01:  # LOADI
                regs[a] = imm & M64
            elif op == 0x07:  # STORE
                addr = (regs[b] + imm) & M64
                if c not in (1, 2, 4, 8):
                    raise _Fault(f"bad access width {c}")
                if addr & (c - 1):
                    raise _Fault(f"unaligned {c}-byte store at {addr:#x}")
                if base0 <= addr and addr + c <= end0:
                    buf, off = buf0, addr - base0
                else:
                    buf, off = _resolve(regions, addr, c)
                if buf is mem:
                    page = off >> PAGE_SHIFT
                    if lazy is not None:
                        lazy.ensure(page)
                    if cow is not None:
                        cow.before_write(page)
                    dirty[page >> 3] |= 1 << (page & 7)
                    if page in code_pages:
                        icache.clear()
                        code_pages.clear()
                buf[off:off + c] = (regs[a] & ((1 << (c << 3)) - 1)).to_bytes(c, "little")
            elif op == 0x06:  # LOAD
                addr = (regs[b] + imm) & M64
                if c not in (1, 2, 4, 8):
                    raise _Fault(f"bad access width {c}")
                if addr & (c - 1):
                    raise _Fault(f"unaligned {c}-byte load at {addr:#x}")
                if base0 <= addr and addr + c <= end0:
                    buf, off = buf0, addr - base0
                else:
                    buf, off = _resolve(regions, addr, c)
                if lazy is not None and buf is mem:
                    lazy.ensure(off >> PAGE_SHIFT)
                regs[a] = int.from_bytes(buf[off:off + c], "little")
            elif op == 0x04:  # SUB
                regs[a] = (regs[b] - regs[c]) & M64
            elif op == 0x05:  # MUL
                regs[a] = (regs[b] * regs[c]) & M64
            elif op == 0x02:  # MOV
                regs[a] = regs[b]
            elif op == 0x08:  # JMP
                pc = imm
            elif op == 0x0A:  # HYPERCALL
                cpu.irq_pending = pending
                machine.instr_count = icount
                try:
                    _hypercall(machine, cpu, regs, imm)
                finally:
                    pending = cpu.irq_pending
                # a hypercall may have rewritten code or materialized pages
                lazy = machine._lazy
            elif op == 0x0B:  # HALT
                n += 1
                icount += 1
                machine.halted = True
                reason = StopReason.HALTED
                break
            else:
                raise _Fault(f"illegal opcode {op:#x} at {ipc:#x}")
            n += 1
            icount += 1
    except _Fault as exc:
        pc = ipc
        machine.halted = True
        machine.fault = str(exc)
        reason = StopReason.FAULT
    finally:
        cpu.pc = pc
        cpu.irq_pending = pending
        machine.instr_count = icount
    return StepOutcome(n, reason)
