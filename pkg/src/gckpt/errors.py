"""Exception hierarchy shared by every gckpt subsystem."""


class GckptError(Exception):
    """Base class for all gckpt errors."""


# -- guest ------------------------------------------------------------------

class GuestError(GckptError):
    pass


class BadProgram(GuestError):
    pass


class OutOfRange(GuestError):
    pass


class MachineHalted(GuestError):
    pass


class BadDisk(GuestError):
    pass


# -- driver -----------------------------------------------------------------

class DriverError(GckptError):
    pass


class BadConfig(DriverError):
    pass


class InvalidHandle(DriverError):
    pass


class Overlap(DriverError):
    pass


class StaleBuffer(DriverError):
    """A slot or region names a buffer/handle that is not live in this shell."""


class NoGetter(DriverError):
    pass


class DecodeError(DriverError):
    pass


class KeyInUse(DriverError):
    pass


class BadLength(DriverError):
    pass


class NoSlots(DriverError):
    pass


# -- plugins ----------------------------------------------------------------

class PluginError(GckptError):
    pass


class DuplicateName(PluginError):
    pass


class UnknownPlugin(PluginError):
    pass


class HandlerFailed(PluginError):
    def __init__(self, name, event, cause):
        super().__init__(f"plugin {name!r} failed during {event.name}: {cause!r}")
        self.name = name
        self.event = event
        self.cause = cause


# -- engine -----------------------------------------------------------------

class CheckpointError(GckptError):
    pass


class CorruptImage(CheckpointError):
    def __init__(self, message, section=None, expected=None, actual=None):
        super().__init__(message)
        self.section = section
        self.expected = expected
        self.actual = actual


class QuiesceTimeout(CheckpointError):
    pass


class PluginFailed(CheckpointError):
    pass


class IoFailure(CheckpointError):
    pass


class MissingBase(CheckpointError):
    pass


class NoBaseImage(CheckpointError):
    pass


class BrokenChain(CheckpointError):
    pass


# -- snapshots --------------------------------------------------------------

class SnapshotError(GckptError):
    pass


class HashMismatch(SnapshotError):
    pass


# -- coordinator ------------------------------------------------------------

class CoordinatorError(GckptError):
    pass


class ChannelStuck(CoordinatorError):
    pass


class TopologyMismatch(CoordinatorError):
    pass
