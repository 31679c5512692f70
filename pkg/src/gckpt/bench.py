"""Desk-scale measurements behind ``gckpt bench``.

Every suite returns a list of row dicts; :func:`write_csv` prints them.
Times are medians over ``trials`` runs, in seconds; throughput in the
overhead suite is best-of-trials.
"""

import csv
import gc
import os
import statistics
import tempfile
import time
from pathlib import Path

from . import fs_snapshot
from .ckpt_engine import engine
from .ckpt_engine.session import Session
from .guest_vm import programs

MiB = 1 << 20
SUITES = ("coverage", "forked", "fast", "overhead", "btrfs")
COLUMNS = {
    "coverage": ("mem_size", "ckpt_seconds", "restart_seconds", "image_bytes"),
    "forked": ("mem_size", "ckpt_seconds", "restart_seconds", "image_bytes"),
    "fast": ("mem_size", "ckpt_seconds", "restart_seconds", "image_bytes"),
    "overhead": ("workload", "with_wrappers_index", "without_wrappers_index"),
    "btrfs": ("disk_bytes", "reflink_seconds", "copy_seconds", "method"),
}


def idle_session(mem_size, *, warmup=10_000, plugins=("vmdriver",), name=None):
    """An idle guest (IRQ-acknowledge loop, timer on) that has run ``warmup`` steps."""
    s = Session.launch(programs.idle_loop(), mem_size, pit_period=1000, plugins=plugins,
                       name=name or f"idle{mem_size // MiB}m")
    s.run(warmup)
    return s


def _median(fn, trials):
    return statistics.median(fn() for _ in range(trials))


def _timed(fn):
    t = time.perf_counter()
    fn()
    return time.perf_counter() - t


def blocking_checkpoint_seconds(session, workdir, trials=3, mode="default"):
    def once():
        session.run(1000)
        return _timed(lambda: engine.checkpoint(session, workdir, mode=mode))
    return _median(once, trials)


def forked_pause_seconds(session, workdir, trials=3):
    def once():
        session.run(1000)
        pending = engine.forked_checkpoint(session, workdir)
        session.run(1000)  # the guest keeps going while the image is written
        pending.result()
        return pending.pause_seconds
    return _median(once, trials)


def restart_seconds(image, trials=3, *, fast=False):
    """Time from restart call to the end of the first guest instruction."""
    def once():
        t = time.perf_counter()
        s = engine.restart(image, fast=fast)
        s.run(1)
        dt = time.perf_counter() - t
        s.close()
        return dt
    return _median(once, trials)


def _mem_suite(mode, mem_sizes, trials, workdir):
    rows = []
    for size in mem_sizes:
        s = idle_session(size)
        d = Path(workdir) / f"{mode}-{size}"
        d.mkdir(parents=True, exist_ok=True)
        try:
            if mode == "forked":
                ckpt = forked_pause_seconds(s, d, trials)
            else:
                ckpt = blocking_checkpoint_seconds(s, d, trials,
                                                   "fast" if mode == "fast" else "default")
            s.run(1000)
            image = engine.checkpoint(s, d / "final.gckp", mode="fast" if mode == "fast" else "default")
            rst = restart_seconds(image, trials, fast=(mode == "fast"))
            rows.append({"mem_size": size, "ckpt_seconds": round(ckpt, 6),
                         "restart_seconds": round(rst, 6), "image_bytes": os.path.getsize(image)})
        finally:
            s.close()
    return rows


def stress_throughput(program, mem_size, plugins, steps):
    """Instructions per second over ``steps`` steps of ``program``.

    The collector is off while timing, as in :mod:`timeit`.
    """
    s = Session.launch(program, mem_size, pit_period=1000, plugins=plugins)
    gc.collect()
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        t = time.perf_counter()
        done = s.run_to_halt(max_steps=steps)
        return done / (time.perf_counter() - t)
    finally:
        if was_enabled:
            gc.enable()
        s.close()


def overhead(trials=9, steps=200_000):
    """Throughput (million instructions/s) with record-only wrappers vs. none.

    Runs alternate, swapping which side goes first, and each side reports
    its best trial: interference only ever slows a run down.
    """
    rows = []
    workloads = {
        "integer": (programs.integer_stress(10 ** 9), 64 * 1024),
        "memory": (programs.memory_walk(10 ** 9, 64), 512 * 1024),
    }
    sides = {"with": ("vmdriver", "record"), "without": ("vmdriver",)}
    for name, (prog, mem) in workloads.items():
        stress_throughput(prog, mem, (), steps // 4)  # warm caches
        best = {"with": 0.0, "without": 0.0}
        for i in range(trials):
            for side in (("with", "without") if i % 2 == 0 else ("without", "with")):
                best[side] = max(best[side], stress_throughput(prog, mem, sides[side], steps))
        rows.append({"workload": name,
                     "with_wrappers_index": round(best["with"] / 1e6, 4),
                     "without_wrappers_index": round(best["without"] / 1e6, 4)})
    return rows


def _sparse_file(path, size):
    with open(path, "wb") as fh:
        fh.write(b"\x01" * 4096)
        fh.truncate(size)


def snapshot_seconds(origin, dest_dir, *, force_copy):
    """Wall time to capture a snapshot (the clone or copy itself, no hashing)."""
    def once():
        t = time.perf_counter()
        ref = fs_snapshot.snapshot_disk(origin, dest_dir, force_copy=force_copy, digest=False)
        dt = time.perf_counter() - t
        fs_snapshot.delete_snapshot(ref)
        return dt, ref.method
    return once


def btrfs(disk_sizes, trials=3, workdir=None):
    rows = []
    for size in disk_sizes:
        d = Path(workdir or tempfile.mkdtemp(prefix="gckpt-btrfs-"))
        origin = d / f"origin-{size}.disk"
        _sparse_file(origin, size)
        try:
            probe = d / "probe.disk"
            cloned = fs_snapshot.try_reflink(origin, probe)
            if probe.exists():
                probe.unlink()
            copy = statistics.median(snapshot_seconds(origin, d, force_copy=True)()[0]
                                     for _ in range(trials))
            if cloned:
                reflink = statistics.median(snapshot_seconds(origin, d, force_copy=False)()[0]
                                            for _ in range(trials))
            else:
                reflink = float("nan")
            rows.append({"disk_bytes": size, "reflink_seconds": round(reflink, 6),
                         "copy_seconds": round(copy, 6),
                         "method": "reflink" if cloned else "full_copy"})
        finally:
            origin.unlink()
    return rows


def run_suite(suite, mem_sizes, *, trials=3, workdir=None):
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; choose from {', '.join(SUITES)}")
    with tempfile.TemporaryDirectory(prefix="gckpt-bench-", dir=workdir) as tmp:
        if suite in ("coverage", "forked", "fast"):
            return _mem_suite(suite, mem_sizes, trials, tmp)
        if suite == "overhead":
            return overhead(trials=max(trials, 5))
        return btrfs(mem_sizes, trials, tmp)


def write_csv(suite, rows, fh):
    w = csv.DictWriter(fh, fieldnames=COLUMNS[suite], lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
