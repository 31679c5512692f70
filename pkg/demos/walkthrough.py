"""Checkpoint one guest four ways and bring each image back.

    python3 demos/walkthrough.py [workdir]

A mixed-traffic guest runs for a while, gets checkpointed in every mode,
and keeps going to halt.  Each image is then restarted and run to halt;
its final memory, console, disk and driver state must match the live run.
"""

import sys
import tempfile
import time
from pathlib import Path

from gckpt.ckpt_engine import engine
from gckpt.ckpt_engine.session import Session
from gckpt.guest_vm import programs

MEM = 256 * 1024


def final(s):
    m = s.machine
    return (bytes(m.memory), bytes(m.console_out), m.disk.contents(), s.driver_snapshot())


def main(workdir):
    work = Path(workdir)
    disk = work / "guest.disk"
    disk.write_bytes(bytes(range(256)) * 128)          # 64 sectors
    prog = programs.random_program(42, target_steps=60_000, mem_size=MEM)

    s = Session.launch(prog, MEM, disk=disk, pit_period=997, pit_line=3, name="demo")
    s.run(20_000)
    base = engine.checkpoint(s, work / "base.gckp")
    s.run(5_000)
    print(f"guest at instruction {s.machine.instr_count}, "
          f"{len(s.machine.dirty_pages())} pages dirty since the base image")

    images = {"incremental": engine.checkpoint(s, work / "delta.gckp", mode="incremental")}
    pending = engine.forked_checkpoint(s, work / "forked.gckp")
    print(f"forked: guest paused {pending.pause_seconds * 1e3:.2f} ms, image still being written")
    images["default"] = engine.checkpoint(s, work / "default.gckp")
    images["fast"] = engine.checkpoint(s, work / "fast.gckp", mode="fast")
    images["forked"] = pending.result()
    s.run_to_halt()
    want = final(s)
    print(f"live run halted after {s.machine.instr_count} instructions, "
          f"{len(s.machine.console_out)} console bytes")

    for mode, img in images.items():
        t = time.perf_counter()
        r = engine.restart(img, fast=(mode == "fast"), disk_path=work / f"{mode}.disk")
        up = time.perf_counter() - t
        r.run_to_halt()
        same = final(r) == want
        print(f"{mode:12s} {img.stat().st_size:>9,d} B  restart {up * 1e3:6.2f} ms  "
              f"{'identical' if same else 'DIFFERENT'}")
        r.close()

    flat = engine.materialize([base, images["incremental"]])
    print(f"materialized delta matches the full image: "
          f"{flat.manifest['content_hash'] == engine.read_manifest_file(images['default'])['content_hash']}")
    s.close()


if __name__ == "__main__":
    if len(sys.argv) > 1:
        main(sys.argv[1])
    else:
        with tempfile.TemporaryDirectory() as d:
            main(d)
