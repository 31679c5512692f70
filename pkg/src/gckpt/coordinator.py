"""Consistent snapshots of several guests connected by message channels.

Channels are FIFO queues owned by the coordinator; a guest reaches them
through the SEND/RECV hypercalls on numbered ports (outgoing port ``i``
is the node's ``i``-th outgoing channel in cluster order, incoming port
``i`` its ``i``-th incoming one).

:class:`MarkerSnapshot` is the marker protocol in its general form:
a node records its state, puts a marker on each outgoing channel and
records each incoming channel until that channel's marker shows up.
:func:`global_checkpoint` runs it with every node quiesced at once, so
each channel's capture is exactly what was queued ahead of its marker.
"""

import base64
import contextlib
import hashlib
import json
import os
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

from .ckpt_engine import engine
from .errors import ChannelStuck, CorruptImage, TopologyMismatch


class _Marker:
    __slots__ = ()

    def __repr__(self):
        return "MARKER"


MARKER = _Marker()

CLUSTER_FILE = "cluster.json"


@dataclass
class Channel:
    src: str
    dst: str
    queue: deque = field(default_factory=deque)
    marker_seen: bool = False
    recording: bool = False
    capture: list = field(default_factory=list)

    @property
    def name(self):
        return f"{self.src}->{self.dst}"

    def in_flight(self):
        return [m for m in self.queue if m is not MARKER]


class MarkerSnapshot:
    """One run of the marker protocol over ``channels``.

    ``record_state(node)`` is called exactly once per node, when that node
    joins the snapshot.  The owner of the channels feeds the protocol: call
    :meth:`initiate` on one or more nodes, then :meth:`on_marker` whenever
    a marker is taken off a channel and :meth:`on_message` whenever an
    ordinary message is delivered.
    """

    def __init__(self, nodes, channels, record_state=None):
        self.nodes = list(nodes)
        self.channels = list(channels)
        self.record_state = record_state
        self.states = {}
        self.recorded = set()
        for ch in self.channels:
            ch.marker_seen = False
            ch.recording = False
            ch.capture = []

    def _record(self, node):
        self.recorded.add(node)
        self.states[node] = self.record_state(node) if self.record_state else None
        for ch in self.channels:
            if ch.src == node:
                ch.queue.append(MARKER)
            if ch.dst == node and not ch.marker_seen:
                ch.recording = True

    def initiate(self, node):
        if node not in self.recorded:
            self._record(node)

    def on_marker(self, channel):
        if channel.dst not in self.recorded:
            # first marker into this node: its state is taken now, and this
            # channel was empty from the snapshot's point of view
            self._record(channel.dst)
        channel.marker_seen = True
        channel.recording = False

    def on_message(self, channel, msg):
        if channel.recording:
            channel.capture.append(msg)

    def drain(self, channel):
        """Resolve ``channel`` without consuming it: copy what precedes the
        marker into the capture and drop the marker, leaving the messages
        queued for the receiver."""
        kept = deque()
        found = False
        for item in channel.queue:
            if item is MARKER and not found:
                found = True
                continue
            if not found:
                self.on_message(channel, item)
            kept.append(item)
        if not found:
            raise ChannelStuck(f"channel {channel.name}: marker never arrived")
        channel.queue = kept
        self.on_marker(channel)

    @property
    def complete(self):
        return (len(self.recorded) == len(self.nodes)
                and all(ch.marker_seen for ch in self.channels))

    def captures(self):
        return {ch.name: list(ch.capture) for ch in self.channels}


class _Ports:
    """A node's view of its channels, attached as ``machine.net``."""

    def __init__(self, cluster, node):
        self.cluster = cluster
        self.node = node

    def send(self, port, data):
        outs = self.cluster.outgoing(self.node)
        if port >= len(outs):
            raise IndexError(f"node {self.node!r} has no outgoing port {port}")
        outs[port].queue.append(bytes(data))

    def recv(self, port):
        ins = self.cluster.incoming(self.node)
        if port >= len(ins):
            raise IndexError(f"node {self.node!r} has no incoming port {port}")
        q = ins[port].queue
        while q and q[0] is MARKER:
            q.popleft()
        return q.popleft() if q else None


class Cluster:
    """Sessions keyed by id, plus the channels between them."""

    def __init__(self, sessions, channels=()):
        self.sessions = dict(sessions)
        self.channels = [c if isinstance(c, Channel) else Channel(*c) for c in channels]
        _check_topology(self.sessions, [(c.src, c.dst) for c in self.channels])
        for node, s in self.sessions.items():
            s.machine.net = _Ports(self, node)

    def outgoing(self, node):
        return [c for c in self.channels if c.src == node]

    def incoming(self, node):
        return [c for c in self.channels if c.dst == node]

    def channel(self, src, dst):
        for c in self.channels:
            if c.src == src and c.dst == dst:
                return c
        raise KeyError((src, dst))

    @property
    def halted(self):
        return all(s.machine.halted for s in self.sessions.values())

    def run_round(self, quantum=1000):
        """Give every live node one quantum, in id order."""
        for node in sorted(self.sessions):
            s = self.sessions[node]
            if not s.machine.halted:
                s.run(quantum)

    def run(self, quantum=1000, *, until=None, max_rounds=None):
        """Round-robin until all nodes halt, ``until(cluster)`` holds or rounds run out."""
        rounds = 0
        while not self.halted:
            if until is not None and until(self):
                break
            if max_rounds is not None and rounds >= max_rounds:
                break
            self.run_round(quantum)
            rounds += 1
        return rounds

    def close(self):
        for s in self.sessions.values():
            s.close()


def _check_topology(sessions, pairs):
    if not sessions:
        raise TopologyMismatch("a cluster needs at least one session")
    for src, dst in pairs:
        if src not in sessions or dst not in sessions:
            raise TopologyMismatch(f"channel {src}->{dst} names a session not in the set")


@dataclass
class ClusterImage:
    directory: Path
    images: dict                # session id -> image file name (relative to directory)
    channels: list              # [{"src", "dst", "messages": [bytes, ...]}]
    manifest_hash: str
    content_hashes: dict = None  # session id -> member content hash (hex)

    def image_path(self, node):
        return self.directory / self.images[node]


def _manifest_hash(images, content_hashes, channels):
    doc = {
        "images": images,
        "content_hashes": content_hashes,
        "channels": [{"src": c["src"], "dst": c["dst"],
                      "messages": [m.hex() for m in c["messages"]]} for c in channels],
    }
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def global_checkpoint(cluster, dest_dir, *, mode="default", timeout=None):
    """Quiesce every node, drain channels with markers, checkpoint each node.

    Channel contents stay queued, so the live cluster continues as if
    nothing happened.
    """
    dest = Path(dest_dir)
    dest.mkdir(parents=True, exist_ok=True)
    with contextlib.ExitStack() as stack:
        for node in sorted(cluster.sessions):
            stack.enter_context(cluster.sessions[node].paused(timeout))
        snap = MarkerSnapshot(sorted(cluster.sessions), cluster.channels)
        for node in sorted(cluster.sessions):
            snap.initiate(node)
        for ch in cluster.channels:
            snap.drain(ch)
        assert snap.complete
        images, hashes = {}, {}
        for node in sorted(cluster.sessions):
            path = engine.checkpoint(cluster.sessions[node], dest / f"{node}.gckp", mode=mode,
                                     timeout=timeout)
            images[node] = path.name
            hashes[node] = engine.read_manifest_file(path)["content_hash"]
    channels = [{"src": ch.src, "dst": ch.dst, "messages": list(ch.capture)}
                for ch in cluster.channels]
    mhash = _manifest_hash(images, hashes, channels)
    doc = {
        "sessions": sorted(cluster.sessions),
        "images": images,
        "content_hashes": hashes,
        "channels": [{"src": c["src"], "dst": c["dst"],
                      "messages": [base64.b64encode(m).decode() for m in c["messages"]]}
                     for c in channels],
        "manifest_hash": mhash,
    }
    tmp = dest / (CLUSTER_FILE + ".part")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True))
    os.replace(tmp, dest / CLUSTER_FILE)
    return ClusterImage(dest, images, channels, mhash, hashes)


def load_cluster_image(path):
    """Read a ClusterImage from its directory (or its ``cluster.json``)."""
    path = Path(path)
    if path.is_dir():
        path = path / CLUSTER_FILE
    try:
        doc = json.loads(path.read_text())
        sessions = list(doc["sessions"])
        images = dict(doc["images"])
        hashes = dict(doc["content_hashes"])
        channels = [{"src": c["src"], "dst": c["dst"],
                     "messages": [base64.b64decode(m, validate=True) for m in c["messages"]]}
                    for c in doc["channels"]]
        mhash = doc["manifest_hash"]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CorruptImage(f"{path}: unreadable cluster manifest: {exc}") from None
    if set(images) != set(sessions):
        raise TopologyMismatch("image list does not match the session list")
    _check_topology(dict.fromkeys(sessions), [(c["src"], c["dst"]) for c in channels])
    if _manifest_hash(images, hashes, channels) != mhash:
        raise CorruptImage(f"{path}: cluster manifest hash mismatch")
    return ClusterImage(path.parent, images, channels, mhash, hashes)


def global_restart(ci, *, fast=False, disk_dir=None, driver=None):
    """Restart every member and refill channels with their captured messages."""
    if not isinstance(ci, ClusterImage):
        ci = load_cluster_image(ci)
    _check_topology(ci.images, [(c["src"], c["dst"]) for c in ci.channels])
    hashes = ci.content_hashes
    sessions = {}
    try:
        for node in sorted(ci.images):
            p = ci.image_path(node)
            if hashes is not None and engine.read_manifest_file(p)["content_hash"] != hashes[node]:
                raise CorruptImage(f"{p}: not the image the cluster manifest names")
            disk = None if disk_dir is None else Path(disk_dir) / f"{node}.disk"
            sessions[node] = engine.restart(p, fast=fast, disk_path=disk, driver=driver, name=node)
    except BaseException:
        for s in sessions.values():
            s.close()
        raise
    channels = [Channel(c["src"], c["dst"], deque(c["messages"])) for c in ci.channels]
    return Cluster(sessions, channels)
