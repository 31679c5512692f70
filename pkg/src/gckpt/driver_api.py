"""In-process stand-in for a VM kernel driver.

A :class:`Driver` plays the host kernel: it owns per-VM vCPU, IRQ chip,
interval timer, memory-slot and shared-region state.  That state is
reachable only through this call API, and the timer is deliberately
write-only (``get_state(PIT)`` raises :class:`NoGetter`), so anything that
wants to re-create it must watch the ``set_state`` calls that configured it.

Launcher memory is modelled by :class:`AddressSpace`: a registry of byte
buffers addressed by opaque handles.  A VM shell belongs to exactly one
address space and only resolves handles from it, so a slot table carried
over from another (checkpointed) launcher is stale until patched.
"""

import enum
import itertools
import struct
from dataclasses import dataclass, field

from .errors import (
    BadConfig, BadLength, DecodeError, InvalidHandle, KeyInUse, NoGetter,
    NoSlots, Overlap, StaleBuffer,
)
from .guest_vm.machine import PAGE_SIZE, step

NUM_REGS = 16
NUM_IRQ_LINES = 32

# process-wide so that handles are never reused, even across drivers
_buffer_ids = itertools.count(1)


class StateKind(enum.IntEnum):
    VCPU = 1
    IRQCHIP = 2
    TSS_ADDR = 3
    SLOTS = 4
    REGIONS = 5
    PIT = 6


@dataclass(frozen=True)
class VmHandle:
    id: int
    generation: int


@dataclass(frozen=True)
class RegionHandle:
    id: int


@dataclass(frozen=True)
class MemorySlot:
    slot_id: int
    guest_phys_base: int
    length: int
    launcher_buffer: int

    @property
    def end(self):
        return self.guest_phys_base + self.length


@dataclass
class SharedRegion:
    handle: RegionHandle
    region_key: int
    length: int
    content: bytearray


@dataclass
class PitConfig:
    period: int = 0
    irq_line: int = 0
    enabled: bool = False


class AddressSpace:
    """Launcher-side buffers, addressed by handles unique within the process."""

    def __init__(self):
        self._buffers = {}
        self._names = {}

    def register(self, buf, name=None):
        handle = next(_buffer_ids)
        self._buffers[handle] = buf
        if name is not None:
            self._names[name] = handle
        return handle

    def free(self, handle):
        self._buffers.pop(handle, None)
        for name, h in list(self._names.items()):
            if h == handle:
                del self._names[name]

    def lookup(self, handle):
        try:
            return self._buffers[handle]
        except KeyError:
            raise StaleBuffer(f"buffer handle {handle} is not live in this address space") from None

    def is_live(self, handle):
        return handle in self._buffers

    def handle_of(self, name):
        return self._names[name]

    def name_of(self, handle):
        for name, h in self._names.items():
            if h == handle:
                return name
        return None


@dataclass
class DriverState:
    """Driver-domain state of one VM; also the ``cpu`` object seen by the interpreter."""

    owner: AddressSpace
    mem_size: int
    regs: list = field(default_factory=lambda: [0] * NUM_REGS)
    pc: int = 0
    acked: int = 0
    irq_pending: int = 0
    irq_mask: int = 0
    pit: PitConfig = field(default_factory=PitConfig)
    tss_addr: int = 0
    slots: dict = field(default_factory=dict)
    regions: tuple = ()
    shared: dict = field(default_factory=dict)  # region_key -> SharedRegion
    run_region_key: int = None

    # the interpreter reads the timer through these three
    @property
    def pit_enabled(self):
        return self.pit.enabled

    @property
    def pit_period(self):
        return self.pit.period

    @property
    def pit_line(self):
        return self.pit.irq_line


# -- StateBlob codecs -------------------------------------------------------

_VCPU = struct.Struct(f"<{NUM_REGS}QQQ")
_IRQCHIP = struct.Struct("<II")
_TSS = struct.Struct("<Q")
_PIT = struct.Struct("<QBB")
_COUNT = struct.Struct("<I")
_SLOT = struct.Struct("<HQQQ")
_REGION_HDR = struct.Struct("<QQQ")
_WIRE = struct.Struct("<HI")


def encode_vcpu(regs, pc, acked):
    return _VCPU.pack(*regs, pc, acked)


def decode_vcpu(blob):
    vals = _unpack(_VCPU, blob, StateKind.VCPU)
    return list(vals[:NUM_REGS]), vals[NUM_REGS], vals[NUM_REGS + 1]


def encode_irqchip(pending, mask):
    return _IRQCHIP.pack(pending, mask)


def encode_tss(addr):
    return _TSS.pack(addr)


def encode_pit(period, irq_line, enabled):
    return _PIT.pack(period, irq_line, 1 if enabled else 0)


def decode_pit(blob):
    period, line, enabled = _unpack(_PIT, blob, StateKind.PIT)
    if enabled not in (0, 1) or line >= NUM_IRQ_LINES or (enabled and period == 0):
        raise DecodeError(f"bad PIT blob: period={period} line={line} enabled={enabled}")
    return PitConfig(period, line, bool(enabled))


def encode_slots(slots):
    out = bytearray(_COUNT.pack(len(slots)))
    for s in slots:
        out += _SLOT.pack(s.slot_id, s.guest_phys_base, s.length, s.launcher_buffer)
    return bytes(out)


def decode_slots(blob):
    (count,) = _unpack_from(_COUNT, blob, 0, StateKind.SLOTS)
    if len(blob) != _COUNT.size + count * _SLOT.size:
        raise DecodeError(f"SLOTS blob length {len(blob)} does not match count {count}")
    return [MemorySlot(*_SLOT.unpack_from(blob, _COUNT.size + i * _SLOT.size)) for i in range(count)]


def encode_regions(regions):
    out = bytearray(_COUNT.pack(len(regions)))
    for r in regions:
        out += _REGION_HDR.pack(r.region_key, r.handle.id, r.length)
        out += r.content
    return bytes(out)


def decode_regions(blob):
    """Return a list of ``(region_key, handle_id, content)`` tuples."""
    (count,) = _unpack_from(_COUNT, blob, 0, StateKind.REGIONS)
    pos = _COUNT.size
    out = []
    for _ in range(count):
        key, hid, length = _unpack_from(_REGION_HDR, blob, pos, StateKind.REGIONS)
        pos += _REGION_HDR.size
        if pos + length > len(blob):
            raise DecodeError("REGIONS blob truncated")
        out.append((key, hid, bytes(blob[pos:pos + length])))
        pos += length
    if pos != len(blob):
        raise DecodeError("trailing bytes in REGIONS blob")
    return out


def encode_wire(kind, payload):
    """Frame a StateBlob for storage: kind u16, length u32, payload."""
    return _WIRE.pack(int(kind), len(payload)) + payload


def decode_wire(data):
    if len(data) < _WIRE.size:
        raise DecodeError("state blob shorter than its header")
    kind, length = _WIRE.unpack_from(data, 0)
    if len(data) != _WIRE.size + length:
        raise DecodeError("state blob length mismatch")
    try:
        kind = StateKind(kind)
    except ValueError:
        raise DecodeError(f"unknown state kind {kind}") from None
    return kind, bytes(data[_WIRE.size:])


def _unpack(st, blob, kind):
    if len(blob) != st.size:
        raise DecodeError(f"{kind.name} blob must be {st.size} bytes, got {len(blob)}")
    return st.unpack(blob)


def _unpack_from(st, blob, pos, kind):
    if pos + st.size > len(blob):
        raise DecodeError(f"{kind.name} blob truncated")
    return st.unpack_from(blob, pos)


# -- the driver -------------------------------------------------------------

class DriverFd:
    """A launcher's open connection to the driver (the ``open("/dev/kvm")`` analog).

    Shells created through it belong to the launcher's address space; every
    other call is forwarded unchanged.
    """

    def __init__(self, driver, owner):
        self.driver = driver
        self.owner = owner

    def create_vm_shell(self, config):
        return self.driver.create_vm_shell(config, owner=self.owner)

    def __getattr__(self, name):
        return getattr(self.driver, name)


class Driver:
    """One "host kernel" worth of VMs."""

    def open(self, owner):
        return DriverFd(self, owner)

    def __init__(self):
        self._vm_ids = itertools.count(1)
        self._region_ids = itertools.count(1)
        self._generation = 0
        self._vms = {}

    def _get(self, vm):
        state = self._vms.get(vm.id)
        if state is None or state[0] != vm.generation:
            raise InvalidHandle(f"no live VM with handle {vm}")
        return state[1]

    def state_of(self, vm):
        """Direct access to a VM's state record (interpreter and debugging use)."""
        return self._get(vm)

    def create_vm_shell(self, config, owner=None):
        mem_size = config["mem_size"] if isinstance(config, dict) else config
        if not isinstance(mem_size, int) or mem_size <= 0 or mem_size % PAGE_SIZE:
            raise BadConfig(f"mem_size {mem_size!r} must be a positive multiple of {PAGE_SIZE}")
        self._generation += 1
        vm = VmHandle(next(self._vm_ids), self._generation)
        self._vms[vm.id] = (vm.generation, DriverState(owner or AddressSpace(), mem_size))
        return vm

    def destroy_vm(self, vm):
        self._get(vm)
        del self._vms[vm.id]

    def set_memory_slot(self, vm, slot):
        state = self._get(vm)
        self._check_slot(state, slot)
        for other in state.slots.values():
            if other.slot_id != slot.slot_id and _overlaps(slot, other):
                raise Overlap(f"slot {slot.slot_id} overlaps slot {other.slot_id}")
        state.slots[slot.slot_id] = slot
        state.regions = ()

    def _check_slot(self, state, slot):
        if slot.length <= 0 or slot.length % PAGE_SIZE:
            raise BadLength(f"slot length {slot.length} must be a positive multiple of {PAGE_SIZE}")
        buf = state.owner.lookup(slot.launcher_buffer)
        if len(buf) != slot.length:
            raise BadLength(f"buffer {slot.launcher_buffer} is {len(buf)} bytes, slot says {slot.length}")

    def map_shared_region(self, vm, region_key, length):
        state = self._get(vm)
        if length <= 0 or length % PAGE_SIZE:
            raise BadLength(f"region length {length} must be a positive multiple of {PAGE_SIZE}")
        if region_key in state.shared:
            raise KeyInUse(f"region key {region_key:#x} already mapped")
        handle = RegionHandle(next(self._region_ids))
        state.shared[region_key] = SharedRegion(handle, region_key, length, bytearray(length))
        if state.run_region_key is None:
            # first mapping of a shell carries the per-run exit record
            state.run_region_key = region_key
        return handle

    def region(self, vm, handle):
        """The content buffer behind ``handle`` (shared by reference)."""
        for r in self._get(vm).shared.values():
            if r.handle == handle:
                return r.content
        raise InvalidHandle(f"no region {handle}")

    def region_handle(self, vm, region_key):
        return self._get(vm).shared[region_key].handle

    def get_state(self, vm, kind):
        state = self._get(vm)
        kind = StateKind(kind)
        if kind is StateKind.VCPU:
            return encode_vcpu(state.regs, state.pc, state.acked)
        if kind is StateKind.IRQCHIP:
            return encode_irqchip(state.irq_pending, state.irq_mask)
        if kind is StateKind.TSS_ADDR:
            return encode_tss(state.tss_addr)
        if kind is StateKind.SLOTS:
            return encode_slots(sorted(state.slots.values(), key=lambda s: s.slot_id))
        if kind is StateKind.REGIONS:
            return encode_regions(sorted(state.shared.values(), key=lambda r: r.region_key))
        raise NoGetter(f"{kind.name} has no getter")

    def set_state(self, vm, kind, blob):
        state = self._get(vm)
        kind = StateKind(kind)
        if kind is StateKind.VCPU:
            regs, pc, acked = decode_vcpu(blob)
            state.regs[:] = regs
            state.pc = pc
            state.acked = acked
        elif kind is StateKind.IRQCHIP:
            state.irq_pending, state.irq_mask = _unpack(_IRQCHIP, blob, kind)
        elif kind is StateKind.TSS_ADDR:
            (state.tss_addr,) = _unpack(_TSS, blob, kind)
        elif kind is StateKind.PIT:
            state.pit = decode_pit(blob)
        elif kind is StateKind.SLOTS:
            slots = decode_slots(blob)
            for i, s in enumerate(slots):
                self._check_slot(state, s)
                for other in slots[:i]:
                    if other.slot_id == s.slot_id or _overlaps(s, other):
                        raise Overlap(f"slot {s.slot_id} overlaps slot {other.slot_id}")
            state.slots = {s.slot_id: s for s in slots}
            state.regions = ()
        elif kind is StateKind.REGIONS:
            entries = decode_regions(blob)
            for key, hid, content in entries:
                live = state.shared.get(key)
                if live is None or live.handle.id != hid:
                    raise StaleBuffer(f"region key {key:#x} handle {hid} is not mapped in this shell")
                if len(content) != live.length:
                    raise BadLength(f"region {key:#x} content length {len(content)} != {live.length}")
            for key, _, content in entries:
                state.shared[key].content[:] = content

    def run(self, vm, machine, budget):
        state = self._get(vm)
        if not state.slots:
            raise NoSlots("no memory slots configured")
        if not state.regions:
            state.regions = tuple(
                (s.guest_phys_base, s.end, state.owner.lookup(s.launcher_buffer))
                for s in sorted(state.slots.values(), key=lambda s: s.guest_phys_base)
            )
        outcome = step(machine, state, budget)
        if state.run_region_key is not None and budget > 0:
            rec = state.shared[state.run_region_key].content
            # exit reason and virtual time; per-call step counts depend on how the
            # caller chunks its budget, so they are not part of the guest trace
            rec[:_RUN_RECORD.size] = _RUN_RECORD.pack(_REASON_CODES[outcome.reason],
                                                      machine.instr_count)
        return outcome


_RUN_RECORD = struct.Struct("<IxxxxQ")
_REASON_CODES = {"budget_exhausted": 1, "halted": 2, "quiesce_requested": 3, "fault": 4}


def _overlaps(a, b):
    return a.guest_phys_base < b.end and b.guest_phys_base < a.end


default_driver = Driver()
