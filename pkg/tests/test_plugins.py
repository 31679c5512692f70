import pytest
from hypothesis import given, settings, strategies as st

from gckpt import plugins as P
from gckpt.ckpt_engine import engine
from gckpt.ckpt_engine.session import Session
from gckpt.driver_api import Driver, MemorySlot, StateKind, encode_pit
from gckpt.errors import DuplicateName, HandlerFailed, PluginFailed, UnknownPlugin
from gckpt.guest_vm import programs
from gckpt.plugins import Plugin, PluginEvent

from helpers import final_state, launch_random


class Logger(Plugin):
    def __init__(self, name, log, fail_on=None):
        super().__init__(name)
        self.log = log
        self.fail_on = fail_on

    def wrap(self, call, proceed):
        self.log.append(("in", self.name, call.op))
        r = proceed(call)
        self.log.append(("out", self.name, call.op))
        return r

    def on_event(self, event, session):
        self.log.append((event.name, self.name))
        if event is self.fail_on:
            raise RuntimeError(f"{self.name} refuses")


def session_with(*plugins, code=None, mem=4096):
    return Session.launch(code or programs.countdown(1000), mem, plugins=list(plugins),
                          driver=Driver(), pit_period=100)


# -- registry ---------------------------------------------------------------------

def test_register_order_preserved():
    s = session_with()
    P.register_plugin(s, Plugin("a"))
    P.register_plugin(s, Plugin("b"))
    assert s.plugins.names == ["a", "b"]


def test_register_duplicate():
    s = session_with(Plugin("a"))
    with pytest.raises(DuplicateName):
        P.register_plugin(s, Plugin("a"))


def test_register_mid_checkpoint_refused():
    s = session_with()
    s.checkpoint_in_progress = True
    with pytest.raises(RuntimeError):
        P.register_plugin(s, Plugin("x"))


def test_make_plugin_unknown():
    with pytest.raises(UnknownPlugin):
        P.make_plugin("nope")


def test_plugin_type_decorator():
    @P.plugin_type("test-custom")
    class Custom(Plugin):
        pass
    try:
        p = P.make_plugin("test-custom")
        assert isinstance(p, Custom) and p.name == "test-custom"
    finally:
        del P.PLUGIN_TYPES["test-custom"]


def test_zero_plugins_round_trip(tmp_path):
    """Without plugins only the launcher domain is saved; restart still brings it back."""
    s = Session.launch(programs.countdown(50), 4096, plugins=(), driver=Driver())
    s.run(40)
    img = engine.checkpoint(s, tmp_path)
    r = engine.restart(img, driver=Driver())
    assert bytes(r.machine.memory) == bytes(s.machine.memory)
    assert r.machine.instr_count == 40
    assert r.plugins.names == []
    # a fresh shell exists but its driver state was never restored
    assert r.driver.get_state(r.vm, StateKind.SLOTS) == b"\x00\x00\x00\x00"


# -- interposition ------------------------------------------------------------------

def test_no_plugins_identity():
    d1, d2 = Driver(), Driver()
    a = Session.launch(programs.countdown(100), 4096, plugins=(), driver=d1)
    b = Session.launch(programs.countdown(100), 4096, plugins=(), driver=d2)
    a.run_to_halt()
    # drive b through the raw driver instead of the interposition chain
    while not b.machine.halted:
        b.driver.run(b.vm, b.machine, 64)
    assert final_state(a) == final_state(b)


def test_wrap_order_and_reverse_return():
    log = []
    s = session_with(Logger("A", log), Logger("B", log))
    log.clear()
    s.call("get_state", vm=s.vm, kind=StateKind.VCPU)
    assert log == [("in", "A", "get_state"), ("in", "B", "get_state"),
                   ("out", "B", "get_state"), ("out", "A", "get_state")]


def test_recording_plugin_captures_pit():
    s = session_with(P.make_plugin("vmdriver"))
    p = s.plugins.get("vmdriver")
    assert p.private_store["pit"] == encode_pit(100, 0, True)
    cfg = encode_pit(250, 4, True)
    s.call("set_state", vm=s.vm, kind=StateKind.PIT, blob=cfg)
    assert p.private_store["pit"] == cfg
    st_ = s.driver.state_of(s.vm).pit
    assert (st_.period, st_.irq_line, st_.enabled) == (250, 4, True)


def test_rewriting_wrapper_reaches_driver():
    class Rewrite(Plugin):
        def __init__(self, target):
            super().__init__("rewrite")
            self.target = target

        def wrap(self, call, proceed):
            if call.op == "set_memory_slot":
                s_ = call.args["slot"]
                call.args["slot"] = MemorySlot(s_.slot_id, s_.guest_phys_base, s_.length,
                                               self.target)
            return proceed(call)

    s = session_with()
    alt = bytearray(4096)
    h = s.space.register(alt, "alt")
    P.register_plugin(s, Rewrite(h))
    s.call("set_memory_slot", vm=s.vm, slot=MemorySlot(0, 0, 4096, s.space.handle_of("ram")))
    assert s.driver.state_of(s.vm).slots[0].launcher_buffer == h


def test_driver_errors_propagate_unchanged():
    s = session_with(P.make_plugin("record"))
    from gckpt.errors import NoGetter
    with pytest.raises(NoGetter):
        s.call("get_state", vm=s.vm, kind=StateKind.PIT)


def test_record_plugin_counts():
    s = session_with(P.make_plugin("record"))
    s.run(10)
    s.run(10)
    assert s.plugins.get("record").counts["run"] == 2
    assert s.plugins.get("record").counts["create_vm_shell"] == 1


def test_launch_log_frozen_after_launch():
    s = session_with()
    n = len(s.launch_log)
    assert [c.op for c in s.launch_log] == [
        "create_vm_shell", "set_memory_slot", "set_state", "set_state", "set_state",
        "set_state", "map_shared_region"]
    s.run(5)
    s.call("get_state", vm=s.vm, kind=StateKind.VCPU)
    assert len(s.launch_log) == n


# -- dispatch -------------------------------------------------------------------------

def test_pre_checkpoint_order():
    log = []
    s = session_with(Logger("A", log), Logger("B", log))
    P.dispatch(s, PluginEvent.PRE_CHECKPOINT)
    assert log[-2:] == [("PRE_CHECKPOINT", "A"), ("PRE_CHECKPOINT", "B")]


def test_post_restart_reverse_order():
    log = []
    s = session_with(Logger("A", log), Logger("B", log))
    P.dispatch(s, PluginEvent.POST_RESTART)
    assert log[-2:] == [("POST_RESTART", "B"), ("POST_RESTART", "A")]


def test_handler_failure_names_plugin():
    log = []
    s = session_with(Logger("A", log), Logger("B", log, fail_on=PluginEvent.PRE_CHECKPOINT),
                     Logger("C", log))
    with pytest.raises(HandlerFailed) as ei:
        P.dispatch(s, PluginEvent.PRE_CHECKPOINT)
    assert ei.value.name == "B"
    assert ("PRE_CHECKPOINT", "C") not in log


def test_handler_failure_aborts_checkpoint_guest_never_resumed(tmp_path):
    log = []
    s = session_with(Logger("A", log, fail_on=PluginEvent.PRE_CHECKPOINT),
                     code=programs.countdown(10**7))
    s.start(chunk=64)
    with pytest.raises(PluginFailed, match="A"):
        engine.checkpoint(s, tmp_path)
    s.join(5)
    assert not s.running
    count = s.machine.instr_count
    assert ("RESUME", "A") not in log
    assert not list(tmp_path.glob("*.gckp"))
    assert s.machine.instr_count == count


def test_event_bracketing(tmp_path):
    log = []
    s = session_with(Logger("A", log))
    s.run(100)
    log.clear()
    img = engine.checkpoint(s, tmp_path)
    assert [e for e in log if len(e) == 2] == [("PRE_CHECKPOINT", "A"), ("RESUME", "A")]
    log2 = []
    r = engine.restart(img, plugins=[Logger("A", log2)], driver=Driver())
    assert [e for e in log2 if len(e) == 2] == [("POST_RESTART", "A")]
    r.close()


def test_forked_event_bracketing(tmp_path):
    log = []
    s = session_with(Logger("A", log), mem=64 * 1024)
    s.run(100)
    log.clear()
    pend = engine.forked_checkpoint(s, tmp_path)
    pend.result(10)
    assert [e for e in log if len(e) == 2] == [("PRE_CHECKPOINT", "A"), ("RESUME", "A")]


# -- store codec and persistence ------------------------------------------------------

_stores = st.dictionaries(st.text(max_size=20), st.binary(max_size=200), max_size=8)


@settings(max_examples=100)
@given(_stores)
def test_store_codec_round_trip(store):
    assert P.decode_store(P.encode_store(store)) == store


@settings(max_examples=15, deadline=None)
@given(_stores)
def test_private_store_persists_across_restart(tmp_path_factory, store):
    class Keeper(Plugin):
        def on_event(self, event, session):
            if event is PluginEvent.PRE_CHECKPOINT:
                self.private_store.update(store)

    d = tmp_path_factory.mktemp("store")
    s = session_with(Keeper("keeper"))
    s.run(10)
    img = engine.checkpoint(s, d)
    seen = {}

    class Reader(Plugin):
        def on_event(self, event, session):
            if event is PluginEvent.POST_RESTART:
                seen.update(self.private_store)

    r = engine.restart(img, plugins=[Reader("keeper")], driver=Driver())
    assert seen == store
    r.close()


def test_launch_log_codec_round_trip():
    s = session_with(P.make_plugin("vmdriver"))
    blob = P.encode_launch_log(s.launch_log)
    back = P.decode_launch_log(blob)
    assert [(c.op, c.args) for c in back] == [(c.op, c.args) for c in s.launch_log]


# -- transparency --------------------------------------------------------------------

@settings(max_examples=5, deadline=None)
@given(st.integers(0, 10**6))
def test_record_only_wrappers_are_transparent(tmp_path_factory, seed):
    d = tmp_path_factory.mktemp("tr")
    a = launch_random(seed, d / "a.disk", plugins=(), target_steps=20_000)
    b = launch_random(seed, d / "b.disk", plugins=("vmdriver", "record"), target_steps=20_000)
    a.run_to_halt(chunk=1000)
    b.run_to_halt(chunk=1000)
    try:
        assert final_state(a) == final_state(b)
    finally:
        a.close()
        b.close()


# -- console viewer ------------------------------------------------------------------

def test_console_viewer_detached_across_checkpoint(tmp_path):
    from gckpt.guest_vm.isa import Asm
    from gckpt.guest_vm import isa
    a = Asm()
    a.loadi(1, 512)
    a.loadi(2, 0x41)
    a.store(2, 1, 0, 1)
    a.loadi(2, 1)
    a.label("top")
    a.hypercall(isa.HC_CONSOLE_WRITE)
    a.jmp("top")
    got = []
    s = Session.launch(a.build(), 4096, plugins=["vmdriver", "console-viewer"],
                       driver=Driver())
    s.attach_viewer(got.append)
    s.run(10)
    seen = []

    class Spy(Plugin):
        def on_event(self, event, session):
            if event is PluginEvent.PRE_CHECKPOINT:
                seen.append(list(session.viewers))

    P.register_plugin(s, Spy("spy"))
    img = engine.checkpoint(s, tmp_path)
    assert seen == [[]]
    assert s.viewers == [got.append]
    s.run(4)
    assert b"".join(got).count(b"A") == 5

    again = []
    viewer = P.ConsoleViewerPlugin("console-viewer", viewers=[again.append])
    r = engine.restart(img, plugins=["vmdriver", viewer], driver=Driver())
    r.run(4)
    assert b"".join(again) == b"AA"
    r.close()
