"""Shared scaffolding for the test modules."""

import random
from pathlib import Path

from gckpt.ckpt_engine.session import Session
from gckpt.guest_vm import programs
from gckpt.guest_vm.machine import SECTOR_SIZE

RP_MEM = 256 * 1024
RP_SECTORS = 64


def make_disk(path, sectors=RP_SECTORS, seed=0):
    path = Path(path)
    path.write_bytes(random.Random(seed).randbytes(sectors * SECTOR_SIZE))
    return path


def final_state(session):
    m = session.machine
    disk = m.disk.contents() if m.disk is not None else b""
    return {
        "memory": bytes(m.memory),
        "console": bytes(m.console_out),
        "disk": disk,
        "driver": session.driver_snapshot(),
        "instr_count": m.instr_count,
        "halted": m.halted,
        "fault": m.fault,
    }


def launch_random(seed, disk_path, *, plugins=("vmdriver",), target_steps=110_000, name=None,
                  driver=None):
    prog = programs.random_program(seed, target_steps=target_steps, mem_size=RP_MEM,
                                   disk_sectors=RP_SECTORS)
    make_disk(disk_path, seed=seed)
    return Session.launch(prog, RP_MEM, disk=disk_path, plugins=plugins, pit_period=997,
                          pit_line=3, name=name or f"rp{seed}", driver=driver)


def uninterrupted(seed, workdir, **kw):
    """Final state of random program ``seed`` run start to finish without checkpoints."""
    s = launch_random(seed, Path(workdir) / f"oracle-{seed}.disk", **kw)
    try:
        s.run_to_halt()
        return final_state(s)
    finally:
        s.close()
