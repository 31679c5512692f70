"""Plugin framework: call interposition on the driver API plus lifecycle events.

A plugin wraps :class:`DriverCall` objects on their way to the driver
(middleware style: ``wrap(call, proceed)``) and receives
``PRE_CHECKPOINT``, ``RESUME`` and ``POST_RESTART`` events.  Whatever a
plugin keeps in ``private_store`` lives in the launcher domain and is
written into every checkpoint image verbatim.

Built-in plugins are selected by name through :data:`PLUGIN_TYPES`.
"""

import enum
import json
import logging
import struct
from dataclasses import dataclass, field
from typing import Any

from . import driver_api
from .driver_api import MemorySlot, StateKind, VmHandle
from .errors import DuplicateName, HandlerFailed, UnknownPlugin

log = logging.getLogger(__name__)


class PluginEvent(enum.Enum):
    PRE_CHECKPOINT = "pre_checkpoint"
    POST_RESTART = "post_restart"
    RESUME = "resume"


@dataclass
class DriverCall:
    """One driver API invocation: operation name, keyword arguments, result."""

    op: str
    args: dict
    result: Any = None

    def to_json(self):
        return {"op": self.op, "args": _jsonable(self.args), "result": _jsonable(self.result)}

    @classmethod
    def from_json(cls, obj):
        return cls(obj["op"], _from_jsonable(obj["args"]), _from_jsonable(obj["result"]))


def _jsonable(v):
    if isinstance(v, VmHandle):
        return {"$vm": [v.id, v.generation]}
    if isinstance(v, driver_api.RegionHandle):
        return {"$region": v.id}
    if isinstance(v, MemorySlot):
        return {"$slot": [v.slot_id, v.guest_phys_base, v.length, v.launcher_buffer]}
    if isinstance(v, StateKind):
        return {"$kind": v.name}
    if isinstance(v, (bytes, bytearray)):
        return {"$hex": bytes(v).hex()}
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def _from_jsonable(v):
    if isinstance(v, dict):
        if len(v) == 1:
            (tag, val), = v.items()
            if tag == "$vm":
                return VmHandle(*val)
            if tag == "$region":
                return driver_api.RegionHandle(val)
            if tag == "$slot":
                return MemorySlot(*val)
            if tag == "$kind":
                return StateKind[val]
            if tag == "$hex":
                return bytes.fromhex(val)
        return {k: _from_jsonable(x) for k, x in v.items()}
    if isinstance(v, list):
        return [_from_jsonable(x) for x in v]
    return v


def encode_launch_log(calls):
    return json.dumps([c.to_json() for c in calls], sort_keys=True, separators=(",", ":")).encode()


def decode_launch_log(data):
    return [DriverCall.from_json(o) for o in json.loads(data.decode())]


# -- private store codec ----------------------------------------------------

_COUNT = struct.Struct("<I")
_KEY = struct.Struct("<H")
_VAL = struct.Struct("<I")


def encode_store(store):
    out = bytearray(_COUNT.pack(len(store)))
    for key in sorted(store):
        k = key.encode()
        v = bytes(store[key])
        out += _KEY.pack(len(k)) + k + _VAL.pack(len(v)) + v
    return bytes(out)


def decode_store(data):
    (count,) = _COUNT.unpack_from(data, 0)
    pos = _COUNT.size
    store = {}
    for _ in range(count):
        (klen,) = _KEY.unpack_from(data, pos)
        pos += _KEY.size
        key = bytes(data[pos:pos + klen]).decode()
        pos += klen
        (vlen,) = _VAL.unpack_from(data, pos)
        pos += _VAL.size
        store[key] = bytes(data[pos:pos + vlen])
        pos += vlen
    if pos != len(data):
        raise ValueError("trailing bytes in plugin store")
    return store


# -- plugins ----------------------------------------------------------------

class Plugin:
    """Base plugin: passes every call through and ignores every event."""

    name = "plugin"

    def __init__(self, name=None):
        if name is not None:
            self.name = name
        self.private_store = {}

    def wrap(self, call, proceed):
        return proceed(call)

    def on_event(self, event, session):
        pass

    def __repr__(self):
        return f"<{type(self).__name__} {self.name!r}>"


class PluginRegistry:
    """Ordered plugin list of one session."""

    def __init__(self, plugins=()):
        self._plugins = []
        self.frozen = False
        for p in plugins:
            self.register(p)

    def register(self, plugin):
        if any(p.name == plugin.name for p in self._plugins):
            raise DuplicateName(f"plugin {plugin.name!r} already registered")
        self._plugins.append(plugin)

    @property
    def names(self):
        return [p.name for p in self._plugins]

    def get(self, name):
        for p in self._plugins:
            if p.name == name:
                return p
        raise KeyError(name)

    def __iter__(self):
        return iter(list(self._plugins))

    def __len__(self):
        return len(self._plugins)


def register_plugin(session, plugin):
    if session.checkpoint_in_progress:
        raise RuntimeError("cannot register plugins while a checkpoint is in progress")
    session.plugins.register(plugin)


def interpose(session, call):
    """Send ``call`` through every plugin's wrapper, then to the driver.

    Wrappers are entered in registration order; the result travels back
    out through them in reverse.
    """
    plugins = list(session.plugins)
    driver = session.driver

    def proceed_from(i):
        if i == len(plugins):
            def apply(c):
                c.result = getattr(driver, c.op)(**c.args)
                return c.result
            return apply

        def chained(c):
            return plugins[i].wrap(c, proceed_from(i + 1))
        return chained

    result = proceed_from(0)(call)
    call.result = result
    return result


def dispatch(session, event):
    """Deliver ``event`` synchronously to every plugin.

    PRE_CHECKPOINT and RESUME go out in registration order, POST_RESTART in
    reverse.  The first handler exception aborts delivery.
    """
    plugins = list(session.plugins)
    if event is PluginEvent.POST_RESTART:
        plugins.reverse()
    for p in plugins:
        try:
            p.on_event(event, session)
        except Exception as exc:
            raise HandlerFailed(p.name, event, exc) from exc


# -- built-in plugins -------------------------------------------------------

_SAVED_KINDS = (StateKind.VCPU, StateKind.IRQCHIP, StateKind.TSS_ADDR, StateKind.SLOTS,
                StateKind.REGIONS)


class VmDriverPlugin(Plugin):
    """Saves driver-domain state at checkpoint and re-installs it on restart.

    The timer has no getter, so its configuration is captured by wrapping
    ``set_state(PIT, ...)`` while the launcher runs.  On restart, slot
    buffer handles and region handles recorded before the checkpoint point
    into the old launcher; they are rewritten to the re-launched shell's
    handles before ``set_state``.  ``patch=False`` skips that rewrite.
    """

    name = "vmdriver"

    def __init__(self, name=None, *, patch=True):
        super().__init__(name)
        self.patch = patch

    def wrap(self, call, proceed):
        result = proceed(call)
        if call.op == "set_state" and StateKind(call.args["kind"]) is StateKind.PIT:
            self.private_store["pit"] = bytes(call.args["blob"])
        return result

    def on_event(self, event, session):
        if event is PluginEvent.PRE_CHECKPOINT:
            self._save(session)
        elif event is PluginEvent.POST_RESTART:
            self._restore(session)

    def _save(self, session):
        driver, vm, space = session.driver, session.vm, session.space
        blobs = {kind: driver.get_state(vm, kind) for kind in _SAVED_KINDS}
        for kind, blob in blobs.items():
            self.private_store[f"state.{kind.name}"] = driver_api.encode_wire(kind, blob)
        names = {}
        for slot in driver_api.decode_slots(blobs[StateKind.SLOTS]):
            names[str(slot.launcher_buffer)] = space.name_of(slot.launcher_buffer)
        self.private_store["slot_buffers"] = json.dumps(names, sort_keys=True).encode()

    def _restore(self, session):
        driver, vm, store = session.driver, session.vm, self.private_store
        if "pit" in store:
            driver.set_state(vm, StateKind.PIT, store["pit"])
        saved = {}
        for kind in _SAVED_KINDS:
            got, blob = driver_api.decode_wire(store[f"state.{kind.name}"])
            if got is not kind:
                raise ValueError(f"stored blob for {kind.name} is tagged {got.name}")
            saved[kind] = blob
        for kind in (StateKind.VCPU, StateKind.IRQCHIP, StateKind.TSS_ADDR):
            driver.set_state(vm, kind, saved[kind])
        slots = saved[StateKind.SLOTS]
        regions = saved[StateKind.REGIONS]
        if self.patch:
            slots = self._patch_slots(session, slots)
            regions = self._patch_regions(session, regions)
        driver.set_state(vm, StateKind.SLOTS, slots)
        driver.set_state(vm, StateKind.REGIONS, regions)

    def _patch_slots(self, session, blob):
        names = json.loads(self.private_store["slot_buffers"].decode())
        patched = []
        for s in driver_api.decode_slots(blob):
            name = names.get(str(s.launcher_buffer))
            if name is None:
                patched.append(s)
                continue
            patched.append(MemorySlot(s.slot_id, s.guest_phys_base, s.length,
                                      session.space.handle_of(name)))
        return driver_api.encode_slots(patched)

    def _patch_regions(self, session, blob):
        out = []
        for key, _old, content in driver_api.decode_regions(blob):
            handle = session.driver.region_handle(session.vm, key)
            out.append(driver_api.SharedRegion(handle, key, len(content), bytearray(content)))
        return driver_api.encode_regions(out)


class RecordingPlugin(Plugin):
    """Record-only wrapper: counts driver calls by operation, changes nothing."""

    name = "record"

    def __init__(self, name=None):
        super().__init__(name)
        self.counts = {}

    def wrap(self, call, proceed):
        self.counts[call.op] = self.counts.get(call.op, 0) + 1
        return proceed(call)

    def on_event(self, event, session):
        if event is PluginEvent.PRE_CHECKPOINT:
            self.private_store["counts"] = json.dumps(self.counts, sort_keys=True).encode()
        elif event is PluginEvent.POST_RESTART and "counts" in self.private_store:
            self.counts = json.loads(self.private_store["counts"].decode())


class ConsoleViewerPlugin(Plugin):
    """Detaches console viewers before a checkpoint and reattaches them after.

    A viewer is an external connection; it is never part of an image.  On
    restart the viewers given to this plugin instance (if any) are attached
    to the restarted session.
    """

    name = "console-viewer"

    def __init__(self, name=None, viewers=()):
        super().__init__(name)
        self.viewers = list(viewers)
        self.detached = []

    def on_event(self, event, session):
        if event is PluginEvent.PRE_CHECKPOINT:
            self.detached = list(session.viewers)
            for v in self.detached:
                session.detach_viewer(v)
            self.private_store["viewers"] = str(len(self.detached)).encode()
        elif event is PluginEvent.RESUME:
            for v in self.detached:
                session.attach_viewer(v)
            self.detached = []
        elif event is PluginEvent.POST_RESTART:
            for v in self.viewers:
                session.attach_viewer(v)


@dataclass
class _Factory:
    cls: type
    kwargs: dict = field(default_factory=dict)

    def __call__(self):
        return self.cls(**self.kwargs)


PLUGIN_TYPES = {
    "vmdriver": _Factory(VmDriverPlugin),
    "vmdriver-nopatch": _Factory(VmDriverPlugin, {"name": "vmdriver-nopatch", "patch": False}),
    "record": _Factory(RecordingPlugin),
    "console-viewer": _Factory(ConsoleViewerPlugin),
}


def plugin_type(name, factory=None, **kwargs):
    """Register a plugin class under ``name`` (usable as a decorator)."""
    def deco(cls):
        PLUGIN_TYPES[name] = _Factory(cls, {"name": name, **kwargs})
        return cls
    return deco(factory) if factory is not None else deco


def make_plugin(name):
    try:
        factory = PLUGIN_TYPES[name]
    except KeyError:
        raise UnknownPlugin(f"no plugin type named {name!r}") from None
    plugin = factory()
    plugin.name = name
    return plugin
