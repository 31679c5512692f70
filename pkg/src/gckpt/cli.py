"""``gckpt``: launch, checkpoint, restart and benchmark guests from the shell.

A launched (or restarted) session listens on a unix socket,
``$GCKPT_RUNTIME_DIR/<session>.sock``, for line-delimited JSON requests::

    {"op": "checkpoint", "mode": "forked", "base": null, "dir": null}
    {"op": "status"}
    {"op": "stop"}

Each request gets one JSON line back.  Requests are queued and served by
the session's own loop between instruction chunks.

Exit codes: 0 ok, 1 usage or configuration error, 2 corrupt image,
3 runtime failure.
"""

import argparse
import hashlib
import json
import logging
import os
import queue
import socket
import socketserver
import sys
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path

from . import bench, coordinator
from .ckpt_engine import engine
from .ckpt_engine.session import Session
from .errors import (
    BrokenChain, CheckpointError, CorruptImage, GckptError, MissingBase, NoBaseImage,
    TopologyMismatch, UnknownPlugin,
)
from .guest_vm.machine import PAGE_SIZE
from .plugins import PLUGIN_TYPES

log = logging.getLogger("gckpt")

EXIT_OK, EXIT_USAGE, EXIT_CORRUPT, EXIT_RUNTIME = 0, 1, 2, 3
CHUNK = 1 << 14


class UsageError(Exception):
    pass


class UnknownSession(UsageError):
    pass


def runtime_dir():
    d = os.environ.get("GCKPT_RUNTIME_DIR") or os.path.join(tempfile.gettempdir(),
                                                            f"gckpt-{os.getuid()}")
    os.makedirs(d, mode=0o700, exist_ok=True)
    return Path(d)


def socket_path(session):
    return runtime_dir() / f"{session}.sock"


# -- configuration ----------------------------------------------------------

@dataclass
class LaunchConfig:
    program: Path
    mem_size: int
    disk: Path = None
    plugins: list = field(default_factory=lambda: ["vmdriver"])
    pit_period: int = 0
    checkpoint_interval: int = None
    interval_mode: str = "default"
    image_dir: Path = None
    name: str = None

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except (OSError, ValueError) as exc:
            raise UsageError(f"{path}: {exc}") from None
        return cls.from_dict(raw, base=path.parent, default_name=path.stem)

    @classmethod
    def from_dict(cls, raw, base=Path("."), default_name="vm"):
        if not isinstance(raw, dict):
            raise UsageError("launch config must be a JSON object")
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        for key in ("program", "mem_size"):
            if key not in raw:
                raise UsageError(f"config is missing {key!r}")

        def rel(p):
            return None if p is None else (Path(base) / p)

        cfg = cls(
            program=rel(raw["program"]),
            mem_size=raw["mem_size"],
            disk=rel(raw.get("disk")),
            plugins=list(raw.get("plugins", ["vmdriver"])),
            pit_period=raw.get("pit_period") or 0,
            checkpoint_interval=raw.get("checkpoint_interval"),
            interval_mode=raw.get("interval_mode", "default"),
            image_dir=rel(raw.get("image_dir", "images")),
            name=raw.get("name") or default_name,
        )
        cfg.validate()
        return cfg

    def validate(self):
        if not isinstance(self.mem_size, int) or self.mem_size <= 0 or self.mem_size % PAGE_SIZE:
            raise UsageError(f"mem_size must be a positive multiple of {PAGE_SIZE}")
        for p in self.plugins:
            if p not in PLUGIN_TYPES:
                raise UsageError(f"unknown plugin {p!r}")
        if self.checkpoint_interval is not None and (
                not isinstance(self.checkpoint_interval, int) or self.checkpoint_interval <= 0):
            raise UsageError("checkpoint_interval must be a positive integer")
        if self.interval_mode not in engine.MODES or self.interval_mode == "incremental":
            raise UsageError(f"interval_mode {self.interval_mode!r} not allowed")
        if not self.program.is_file():
            raise UsageError(f"program {self.program} not found")
        if self.disk is not None and not self.disk.is_file():
            raise UsageError(f"disk {self.disk} not found")


def launch_session(cfg):
    code = cfg.program.read_bytes()
    return Session.launch(code, cfg.mem_size, disk=cfg.disk, plugins=cfg.plugins,
                          pit_period=cfg.pit_period or None, name=cfg.name)


# -- control endpoint -------------------------------------------------------

class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        for line in self.rfile:
            line = line.strip()
            if not line:
                continue
            try:
                req = json.loads(line)
                if not isinstance(req, dict) or "op" not in req:
                    raise ValueError("request must be an object with an 'op'")
            except ValueError as exc:
                reply = {"ok": False, "error": str(exc), "kind": "BadRequest"}
            else:
                reply = self.server.runner.submit(req)
            self.wfile.write((json.dumps(reply) + "\n").encode())
            self.wfile.flush()


class _Server(socketserver.ThreadingMixIn, socketserver.UnixStreamServer):
    daemon_threads = True


class Runner:
    """Runs a session to halt, serving control requests and interval checkpoints."""

    def __init__(self, session, *, image_dir, interval=None, interval_mode="default",
                 serve=True, out=None, linger=False):
        self.session = session
        self.linger = linger
        self.image_dir = Path(image_dir)
        self.interval = interval
        self.interval_mode = interval_mode
        self.requests = queue.Queue()
        self.pending = []
        self.images = []
        self.stopped = False
        self.out = out
        self._console_seen = len(session.machine.console_out)
        self._server = None
        if serve:
            path = socket_path(session.name)
            if path.exists():
                try:
                    with socket.socket(socket.AF_UNIX) as probe:
                        probe.connect(str(path))
                    raise UsageError(f"session {session.name!r} is already running")
                except ConnectionRefusedError:
                    path.unlink()
            self._server = _Server(str(path), _Handler)
            self._server.runner = self
            threading.Thread(target=self._server.serve_forever, daemon=True).start()

    def submit(self, req):
        done = threading.Event()
        box = {}
        self.requests.put((req, box, done))
        self.session.machine.request_quiesce()
        if not done.wait(60):
            return {"ok": False, "error": "session did not respond", "kind": "Timeout"}
        return box["reply"]

    def _serve(self, block=False):
        while True:
            try:
                req, box, done = self.requests.get(block=block)
            except queue.Empty:
                return
            block = False
            try:
                box["reply"] = self._handle(req)
            except GckptError as exc:
                box["reply"] = {"ok": False, "error": str(exc), "kind": type(exc).__name__}
            except Exception as exc:  # keep the guest alive whatever the request did
                log.exception("control request failed")
                box["reply"] = {"ok": False, "error": str(exc), "kind": type(exc).__name__}
            done.set()

    def _handle(self, req):
        op = req["op"]
        m = self.session.machine
        if op == "status":
            return {"ok": True, "session": self.session.name, "instr_count": m.instr_count,
                    "halted": m.halted, "fault": m.fault, "images": [str(p) for p in self.images]}
        if op == "stop":
            self.stopped = True
            return {"ok": True}
        if op == "checkpoint":
            mode = req.get("mode", "default")
            if mode not in engine.MODES:
                return {"ok": False, "error": f"unknown mode {mode!r}", "kind": "BadRequest"}
            dest = Path(req.get("dir") or self.image_dir)
            path = self.checkpoint(mode, dest, base=req.get("base"))
            return {"ok": True, "path": str(path), "instr_count": m.instr_count}
        return {"ok": False, "error": f"unknown op {op!r}", "kind": "BadRequest"}

    def checkpoint(self, mode, dest, base=None):
        dest.mkdir(parents=True, exist_ok=True)
        if mode == "forked":
            pc = engine.forked_checkpoint(self.session, dest)
            self.pending.append(pc)
            path = pc.path
        else:
            path = engine.checkpoint(self.session, dest, mode=mode, base=base)
        self.images.append(path)
        return path

    def _flush_console(self):
        if self.out is None:
            return
        buf = self.session.machine.console_out
        if len(buf) > self._console_seen:
            self.out.write(bytes(buf[self._console_seen:]))
            self.out.flush()
            self._console_seen = len(buf)

    def run(self):
        s, m = self.session, self.session.machine
        try:
            while not self.stopped:
                self._serve()
                if self.stopped:
                    break
                if m.halted:
                    if not (self.linger and self._server):
                        break
                    self._serve(block=True)  # answer requests until told to stop
                    continue
                budget = CHUNK
                if self.interval:
                    budget = min(budget, self.interval - m.instr_count % self.interval)
                s.run(budget)
                self._flush_console()
                if self.interval and not m.halted and m.instr_count % self.interval == 0:
                    self.checkpoint(self.interval_mode, self.image_dir)
            for pc in self.pending:
                pc.result()
        finally:
            self._flush_console()
            self.close()
        return m

    def close(self):
        while True:
            try:
                _, box, done = self.requests.get_nowait()
            except queue.Empty:
                break
            box["reply"] = {"ok": False, "error": "session has ended", "kind": "UnknownSession"}
            done.set()
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
            try:
                socket_path(self.session.name).unlink()
            except FileNotFoundError:
                pass
            self._server = None


def request(session, req, timeout=120):
    path = socket_path(session)
    try:
        with socket.socket(socket.AF_UNIX) as sock:
            sock.settimeout(timeout)
            sock.connect(str(path))
            sock.sendall((json.dumps(req) + "\n").encode())
            buf = b""
            while not buf.endswith(b"\n"):
                chunk = sock.recv(65536)
                if not chunk:
                    break
                buf += chunk
    except (FileNotFoundError, ConnectionRefusedError):
        raise UnknownSession(f"unknown session {session!r} (no endpoint at {path})") from None
    return json.loads(buf)


# -- commands ---------------------------------------------------------------

def _stdout():
    return getattr(sys.stdout, "buffer", None)


def _finish(machine):
    if machine.fault:
        print(f"gckpt: guest fault: {machine.fault}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_launch(args):
    cfg = LaunchConfig.load(args.config)
    if args.name:
        cfg.name = args.name
    session = launch_session(cfg)
    runner = Runner(session, image_dir=cfg.image_dir, interval=cfg.checkpoint_interval,
                    interval_mode=cfg.interval_mode, serve=not args.no_control,
                    out=None if args.quiet else _stdout(), linger=args.linger)
    try:
        machine = runner.run()
    finally:
        session.close()
    for p in runner.images:
        print(f"gckpt: image {p}", file=sys.stderr)
    return _finish(machine)


_USAGE_KINDS = {"NoBaseImage", "BrokenChain", "MissingBase", "BadRequest", "UnknownSession"}


def cmd_ckpt(args):
    req = {"op": "checkpoint", "mode": args.mode, "base": args.base,
           "dir": str(Path(args.dir).resolve()) if args.dir else None}
    reply = request(args.session, req)
    if not reply.get("ok"):
        print(f"gckpt: {reply.get('error')}", file=sys.stderr)
        return EXIT_USAGE if reply.get("kind") in _USAGE_KINDS else EXIT_RUNTIME
    print(reply["path"])
    return EXIT_OK


def cmd_status(args):
    print(json.dumps(request(args.session, {"op": "status"})))
    return EXIT_OK


def cmd_stop(args):
    request(args.session, {"op": "stop"})
    return EXIT_OK


def cmd_restart(args):
    session = engine.restart(args.image, fast=args.fast, disk_path=args.disk,
                             plugins=args.plugins.split(",") if args.plugins else None,
                             name=args.name)
    runner = Runner(session, image_dir=args.image_dir or Path(args.image).parent,
                    interval=args.interval, serve=not args.no_control,
                    out=None if args.quiet else _stdout())
    try:
        machine = runner.run()
    finally:
        session.close()
    return _finish(machine)


def cmd_images(args):
    d = Path(args.dir)
    if not d.is_dir():
        raise UsageError(f"{d} is not a directory")
    bad = 0
    for p in sorted(d.glob(f"*{engine.SUFFIX}")):
        try:
            parts = engine.verify_image(p)
            man = parts.manifest
            flags = parts.flags
            kind = ("incremental" if flags & engine.FLAG_DELTA else
                    "fast" if flags & engine.FLAG_FAST else "compressed")
            print(f"{p.name}\t{kind}\t{man.get('instr_count')}\t{p.stat().st_size}\t"
                  f"{man.get('content_hash', '')[:16]}\tok")
        except (CheckpointError, OSError) as exc:
            bad += 1
            print(f"{p.name}\t-\t-\t{p.stat().st_size}\t-\tCORRUPT: {exc}")
    return EXIT_CORRUPT if bad else EXIT_OK


def cmd_bench(args):
    try:
        sizes = [int(x) * bench.MiB for x in args.mem_sizes.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"bad --mem-sizes {args.mem_sizes!r}") from None
    rows = bench.run_suite(args.suite, sizes, trials=args.trials)
    bench.write_csv(args.suite, rows, sys.stdout)
    return EXIT_OK


def _cluster_summary(cluster):
    return {node: {"instr_count": s.machine.instr_count, "halted": s.machine.halted,
                   "fault": s.machine.fault, "console_bytes": len(s.machine.console_out),
                   "console_sha256": hashlib.sha256(s.machine.console_out).hexdigest()}
            for node, s in sorted(cluster.sessions.items())}


def cmd_cluster(args):
    if args.action == "ckpt":
        path = Path(args.topology)
        try:
            topo = json.loads(path.read_text())
            members = topo["sessions"]
            channels = [tuple(c) for c in topo.get("channels", [])]
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise UsageError(f"{path}: bad topology: {exc}") from None
        sessions = {}
        try:
            for node, raw in members.items():
                cfg = LaunchConfig.from_dict(raw, base=path.parent, default_name=node)
                cfg.name = node
                sessions[node] = launch_session(cfg)
            cluster = coordinator.Cluster(sessions, channels)
            quantum = topo.get("quantum", 1000)
            cluster.run(quantum, max_rounds=topo.get("snapshot_after_rounds", 0))
            out = path.parent / topo.get("out", "cluster-image")
            coordinator.global_checkpoint(cluster, out)
            print(out)
            cluster.run(quantum)
            print(json.dumps(_cluster_summary(cluster), sort_keys=True))
        finally:
            for s in sessions.values():
                s.close()
        return EXIT_OK
    cluster = coordinator.global_restart(args.topology)
    try:
        cluster.run(args.quantum)
        print(json.dumps(_cluster_summary(cluster), sort_keys=True))
    finally:
        cluster.close()
    return EXIT_OK


# -- entry point ------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="gckpt", description="checkpoint/restart for sandbox guests")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("launch", help="run a guest to halt from a JSON launch config")
    sp.add_argument("config")
    sp.add_argument("--name", help="session id (default: config file stem)")
    sp.add_argument("--quiet", action="store_true", help="do not copy guest console to stdout")
    sp.add_argument("--no-control", action="store_true", help="do not open a control socket")
    sp.add_argument("--linger", action="store_true",
                    help="keep serving requests after the guest halts, until 'stop'")
    sp.set_defaults(func=cmd_launch)

    sp = sub.add_parser("ckpt", help="checkpoint a running session")
    sp.add_argument("session")
    sp.add_argument("--mode", default="default", choices=engine.MODES)
    sp.add_argument("--base", help="base image for --mode incremental")
    sp.add_argument("--dir", help="directory for the image (default: the session's)")
    sp.set_defaults(func=cmd_ckpt)

    sp = sub.add_parser("status", help="query a running session")
    sp.add_argument("session")
    sp.set_defaults(func=cmd_status)

    sp = sub.add_parser("stop", help="stop a running session")
    sp.add_argument("session")
    sp.set_defaults(func=cmd_stop)

    sp = sub.add_parser("restart", help="restart an image and run it to halt")
    sp.add_argument("image")
    sp.add_argument("--fast", action="store_true", help="demand-load memory (fast-layout images)")
    sp.add_argument("--disk", help="restore the guest disk here instead of its original path")
    sp.add_argument("--plugins", help="comma-separated plugin list overriding the image's")
    sp.add_argument("--name", help="session id for the control socket")
    sp.add_argument("--interval", type=int, help="checkpoint every N instructions")
    sp.add_argument("--image-dir")
    sp.add_argument("--quiet", action="store_true")
    sp.add_argument("--no-control", action="store_true")
    sp.set_defaults(func=cmd_restart)

    sp = sub.add_parser("images", help="list and verify images in a directory")
    sp.add_argument("dir")
    sp.set_defaults(func=cmd_images)

    sp = sub.add_parser("bench", help="run a benchmark suite, CSV on stdout")
    sp.add_argument("--suite", required=True, choices=bench.SUITES)
    sp.add_argument("--mem-sizes", default="4,16,64", help="MiB, comma separated")
    sp.add_argument("--trials", type=int, default=3)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("cluster", help="coordinated checkpoint/restart of several guests")
    sp.add_argument("action", choices=("ckpt", "restart"))
    sp.add_argument("topology", help="topology JSON (ckpt) or cluster image dir/cluster.json (restart)")
    sp.add_argument("--quantum", type=int, default=1000)
    sp.set_defaults(func=cmd_cluster)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="gckpt: %(message)s")
    try:
        return args.func(args)
    except (UsageError, UnknownPlugin, NoBaseImage, BrokenChain, MissingBase,
            TopologyMismatch) as exc:
        print(f"gckpt: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CorruptImage as exc:
        print(f"gckpt: corrupt image: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except (GckptError, OSError) as exc:
        print(f"gckpt: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
