"""A launched guest: machine, driver connection, plugins and launch log."""

import threading
from contextlib import contextmanager

from ..driver_api import (
    AddressSpace, MemorySlot, StateKind, default_driver, encode_irqchip, encode_pit,
    encode_tss, encode_vcpu,
)
from ..errors import QuiesceTimeout
from ..guest_vm.machine import StopReason, load_program
from ..plugins import DriverCall, PluginRegistry, interpose, make_plugin

RUN_REGION_KEY = 0x72756E  # "run": stable identity of the exit-record page
RUN_REGION_LEN = 4096
DEFAULT_PLUGINS = ("vmdriver",)
DEFAULT_QUIESCE_TIMEOUT = 5.0


def _plugin_list(plugins):
    return [make_plugin(p) if isinstance(p, str) else p for p in plugins]


class Session:
    """Everything the engine needs to checkpoint one guest.

    ``driver`` is the launcher's open connection to the driver; ``space``
    is the launcher address space whose buffer ``"ram"`` backs guest
    memory.  ``launch_log`` is frozen once :meth:`launch` returns.
    """

    def __init__(self, machine, driver, space, vm, plugins, launch_log, *, disk_path=None,
                 name="vm"):
        self.machine = machine
        self.driver = driver
        self.space = space
        self.vm = vm
        self.plugins = plugins if isinstance(plugins, PluginRegistry) else PluginRegistry(plugins)
        self.launch_log = list(launch_log)
        self.disk_path = disk_path
        self.name = name
        self.viewers = []
        self.checkpoint_in_progress = False
        self.quiesce_timeout = DEFAULT_QUIESCE_TIMEOUT
        self.chain_head = None  # (image path, content-hash future) the dirty bitmap is relative to
        self.last_pause_seconds = None
        self._launching = False
        self._console_seen = 0
        self._cv = threading.Condition()
        self._pausers = 0
        self._stepping = False
        self._runner = None
        self._stop = False

    # -- launch -------------------------------------------------------------

    @classmethod
    def launch(cls, program, mem_size, *, disk=None, plugins=DEFAULT_PLUGINS, pit_period=None,
               pit_line=0, irq_mask=0, tss_addr=0, driver=None, name="vm", entry_point=0):
        """Start a guest the way a VM launcher does, recording every driver call.

        Steps: open the driver, create the VM, register guest RAM as memory
        slot 0, configure the IRQ chip (and timer), initialize the vCPU,
        then map the shared run-record region.
        """
        machine = load_program(program, mem_size, disk=disk)
        space = AddressSpace()
        ram = space.register(machine._mem, "ram")
        fd = (driver or default_driver).open(space)
        session = cls(machine, fd, space, None, _plugin_list(plugins), [],
                      disk_path=machine.disk.path if machine.disk else None, name=name)
        session._launching = True
        try:
            vm = session.call("create_vm_shell", config={"mem_size": mem_size})
            session.vm = vm
            session.call("set_memory_slot", vm=vm, slot=MemorySlot(0, 0, mem_size, ram))
            session.call("set_state", vm=vm, kind=StateKind.IRQCHIP,
                         blob=encode_irqchip(0, irq_mask))
            if pit_period:
                session.call("set_state", vm=vm, kind=StateKind.PIT,
                             blob=encode_pit(pit_period, pit_line, True))
            session.call("set_state", vm=vm, kind=StateKind.VCPU,
                         blob=encode_vcpu([0] * 16, entry_point, 0))
            session.call("set_state", vm=vm, kind=StateKind.TSS_ADDR, blob=encode_tss(tss_addr))
            session.call("map_shared_region", vm=vm, region_key=RUN_REGION_KEY,
                         length=RUN_REGION_LEN)
        finally:
            session._launching = False
        return session

    def call(self, op, **args):
        """Issue one driver call through the plugin chain."""
        c = DriverCall(op, args)
        result = interpose(self, c)
        if self._launching:
            self.launch_log.append(c)
        return result

    # -- running ------------------------------------------------------------

    def run(self, budget):
        outcome = self.call("run", vm=self.vm, machine=self.machine, budget=budget)
        if self.viewers:
            self._feed_viewers()
        return outcome

    def run_to_halt(self, chunk=1 << 16, max_steps=None):
        """Step until the guest halts or faults; returns instructions executed."""
        total = 0
        while not self.machine.halted:
            budget = chunk if max_steps is None else min(chunk, max_steps - total)
            if budget <= 0:
                break
            total += self.run(budget).steps_executed
        return total

    def run_until(self, instr_count, chunk=1 << 16):
        while not self.machine.halted and self.machine.instr_count < instr_count:
            self.run(min(chunk, instr_count - self.machine.instr_count))

    @property
    def halted(self):
        return self.machine.halted

    def run_record(self):
        """The launcher's view of the shared exit-record page."""
        return self.driver.region(self.vm, self.driver.region_handle(self.vm, RUN_REGION_KEY))

    def driver_snapshot(self):
        """Comparable driver-domain state, with launcher/region handles factored out."""
        st = self.driver.state_of(self.vm)
        return {
            "vcpu": self.driver.get_state(self.vm, StateKind.VCPU),
            "irqchip": self.driver.get_state(self.vm, StateKind.IRQCHIP),
            "tss": self.driver.get_state(self.vm, StateKind.TSS_ADDR),
            "pit": (st.pit.period, st.pit.irq_line, st.pit.enabled),
            "slots": sorted((s.slot_id, s.guest_phys_base, s.length,
                             self.space.name_of(s.launcher_buffer)) for s in st.slots.values()),
            "regions": sorted((k, bytes(r.content)) for k, r in st.shared.items()),
        }

    # -- console viewers ------------------------------------------------------

    def attach_viewer(self, viewer):
        self.viewers.append(viewer)
        self._console_seen = len(self.machine.console_out)

    def detach_viewer(self, viewer):
        self.viewers.remove(viewer)

    def _feed_viewers(self):
        out = self.machine.console_out
        if len(out) > self._console_seen:
            chunk = bytes(out[self._console_seen:])
            self._console_seen = len(out)
            for v in self.viewers:
                v(chunk)

    # -- background execution -------------------------------------------------

    def start(self, chunk=1 << 14):
        """Run the guest on its own thread until it halts or :meth:`stop` is called."""
        if self._runner is not None and self._runner.is_alive():
            raise RuntimeError("session already running")
        self._stop = False
        self._runner = threading.Thread(target=self._run_loop, args=(chunk,),
                                        name=f"guest-{self.name}", daemon=True)
        self._runner.start()

    def _run_loop(self, chunk):
        while True:
            with self._cv:
                while self._pausers and not self._stop:
                    self._cv.wait()
                if self._stop or self.machine.halted:
                    return
                self._stepping = True
            try:
                self.run(chunk)
            finally:
                with self._cv:
                    self._stepping = False
                    self._cv.notify_all()

    def stop(self, timeout=None):
        with self._cv:
            self._stop = True
            self.machine.request_quiesce()
            self._cv.notify_all()
        if self._runner is not None:
            self._runner.join(timeout)
        self.machine.cancel_quiesce()

    def abort(self):
        """Keep the guest stopped: a failed checkpoint never resumes it."""
        with self._cv:
            self._stop = True
            self._cv.notify_all()

    def join(self, timeout=None):
        if self._runner is not None:
            self._runner.join(timeout)

    @property
    def running(self):
        return self._runner is not None and self._runner.is_alive()

    @contextmanager
    def paused(self, timeout=None):
        """Hold the guest at a safe point for the duration of the block."""
        timeout = self.quiesce_timeout if timeout is None else timeout
        with self._cv:
            self._pausers += 1
            if self._stepping:
                self.machine.request_quiesce()
            if not self._cv.wait_for(lambda: not self._stepping, timeout):
                self._pausers -= 1
                self.machine.cancel_quiesce()
                self._cv.notify_all()
                raise QuiesceTimeout(f"guest {self.name!r} did not reach a safe point "
                                     f"within {timeout}s")
        try:
            yield
        finally:
            with self._cv:
                self._pausers -= 1
                self.machine.cancel_quiesce()
                self._cv.notify_all()

    def close(self):
        if self.running:
            self.stop()
        try:
            self.driver.destroy_vm(self.vm)
        except Exception:
            pass
        if self.machine.disk is not None:
            self.machine.disk.close()


def launch(program, mem_size, **kwargs):
    return Session.launch(program, mem_size, **kwargs)


def is_terminal(outcome):
    return outcome.reason in (StopReason.HALTED, StopReason.FAULT)
