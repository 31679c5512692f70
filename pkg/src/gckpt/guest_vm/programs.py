"""Guest programs used by tests, demos and the benchmark harness.

None of these stand for anything in particular; they exist to push
register, memory, console, disk, IRQ and network traffic through the
machine in a reproducible way.

Register conventions shared by the generators below:

    r15  constant 1
    r9   constant 0
    r12  data base address
    r13  LCG state
    r11  LCG multiplier
"""

import random

from . import isa
from .isa import Asm
from .machine import PAGE_SIZE, SECTOR_SIZE

LCG_MUL = 6364136223846793005 & 0x7FFFFFFF  # must fit a LOADI immediate
LCG_ADD = 1442695040888963407 & 0x7FFFFFFF


def _prologue(a, data_base, seed=1):
    a.loadi(15, 1)
    a.loadi(9, 0)
    a.loadi(12, data_base)
    a.loadi(13, seed & 0x7FFFFFFF)
    a.loadi(11, LCG_MUL)


def _lcg(a):
    a.mul(13, 13, 11)
    a.add(13, 13, 9, LCG_ADD)


def halt_only():
    return isa.halt()


def countdown(n):
    """``n`` loop iterations of three instructions, then HALT (3n + 3 steps)."""
    a = Asm()
    a.loadi(1, n)
    a.loadi(15, 1)
    a.label("top")
    a.sub(1, 1, 15)
    a.add(2, 2, 1)
    a.jnz(1, "top")
    a.halt()
    return a.build()


def integer_stress(iterations):
    """Register-only arithmetic loop (the integer half of the overhead suite)."""
    a = Asm()
    _prologue(a, 0)
    a.loadi(14, iterations)
    a.label("top")
    _lcg(a)
    a.add(1, 1, 13)
    a.mul(2, 1, 13)
    a.sub(3, 2, 1)
    a.add(4, 3, 15, 7)
    a.sub(14, 14, 15)
    a.jnz(14, "top")
    a.halt()
    return a.build()


def memory_walk(iterations, pages, data_base=PAGE_SIZE, stride=PAGE_SIZE // 4):
    """Store/load loop sweeping ``pages`` pages (the memory half of the overhead suite)."""
    a = Asm()
    _prologue(a, data_base)
    wrap = pages * PAGE_SIZE // stride
    a.mov(8, 12)
    a.loadi(7, wrap)
    a.loadi(14, iterations)
    a.label("top")
    _lcg(a)
    a.store(13, 8, 0, 8)
    a.load(6, 8, 0, 8)
    a.add(5, 5, 6)
    a.add(8, 8, 9, stride)
    a.sub(7, 7, 15)
    a.jnz(7, "nowrap")
    a.mov(8, 12)
    a.loadi(7, wrap)
    a.label("nowrap")
    a.sub(14, 14, 15)
    a.jnz(14, "top")
    a.halt()
    return a.build()


def idle_loop():
    """Acknowledge interrupts forever; never halts."""
    a = Asm()
    a.label("top")
    a.hypercall(isa.HC_YIELD)
    a.jmp("top")
    return a.build()


def irq_counter(iterations):
    """YIELD ``iterations`` times; r5 counts lines acknowledged, then HALT."""
    a = Asm()
    a.loadi(15, 1)
    a.loadi(9, 0)
    a.loadi(14, iterations)
    a.label("top")
    a.hypercall(isa.HC_YIELD)
    a.add(6, 0, 9, 1)
    a.jnz(6, "got")
    a.jmp("next")
    a.label("got")
    a.add(5, 5, 15)
    a.label("next")
    a.sub(14, 14, 15)
    a.jnz(14, "top")
    a.halt()
    return a.build()


def random_fill(nbytes, data_base=PAGE_SIZE):
    """DMA ``nbytes`` from disk sector 0 into RAM at ``data_base``, then idle.

    Paired with a disk full of random bytes this leaves ``nbytes`` of
    incompressible guest memory.
    """
    a = Asm()
    a.loadi(1, data_base)
    a.loadi(2, 0)
    a.loadi(3, nbytes // SECTOR_SIZE)
    a.hypercall(isa.HC_DISK_READ)
    a.label("idle")
    a.hypercall(isa.HC_YIELD)
    a.jmp("idle")
    return a.build()


def random_program(seed, *, target_steps=120_000, mem_size=256 * 1024, disk_sectors=64,
                   ring_pages=16):
    """A reproducible mixed-traffic guest, roughly ``target_steps`` long, ending in HALT.

    The loop body is a random sequence of blocks (arithmetic, stores, loads,
    console writes, disk reads and writes, IRQ acknowledgements, virtual-time
    reads), all feeding one LCG state so that any lost or duplicated effect
    changes the final memory image.  Needs a disk of ``disk_sectors``
    sectors.
    """
    rng = random.Random(seed)
    data_base = 4 * PAGE_SIZE
    ring_len = ring_pages * PAGE_SIZE
    console_buf = data_base + ring_len
    dma_buf = console_buf + PAGE_SIZE
    if dma_buf + PAGE_SIZE > mem_size:
        raise ValueError("mem_size too small for random_program")
    layout = {
        "stride": rng.choice([8, 24, 520, 1032, 4096, 4104]),
        "console_buf": console_buf, "dma_buf": dma_buf, "disk_sectors": disk_sectors,
    }
    layout["wrap"] = (ring_len - SECTOR_SIZE) // layout["stride"]

    kinds = ["arith", "store", "load", "console", "disk_w", "disk_r", "yield", "vtime", "walk"]
    weights = [4, 4, 3, 1, 1, 1, 2, 1, 2]
    plan = [rng.choices(kinds, weights)[0] for _ in range(rng.randint(8, 14))]
    plan += ["store", "walk", "yield", "console"]  # every seed touches memory, IRQs, console
    rng.shuffle(plan)
    plan = [(kind, rng.choice([0, 8, 16])) for kind in plan]

    scratch = Asm()
    for i, (kind, off) in enumerate(plan):
        _block(scratch, kind, off, i, layout)
    per_iter = len(scratch.build()) // isa.INSN_SIZE + 2
    iterations = max(1, target_steps // per_iter)

    a = Asm()
    _prologue(a, data_base, seed)
    a.loadi(14, iterations)
    a.mov(8, 12)
    a.loadi(7, layout["wrap"])
    a.loadi(5, 0)           # sector cursor
    a.loadi(4, disk_sectors)
    a.loadi(10, console_buf)
    a.label("loop")
    for i, (kind, off) in enumerate(plan):
        _block(a, kind, off, i, layout)
    a.sub(14, 14, 15)
    a.jnz(14, "loop")
    a.halt()
    return a.build()


def _block(a, kind, off, i, lay):
    if kind == "arith":
        _lcg(a)
        a.add(1, 1, 13)
        a.mul(2, 2, 1)
    elif kind == "store":
        _lcg(a)
        a.store(13, 8, off, 8)
    elif kind == "load":
        a.load(6, 8, off, 8)
        a.add(13, 13, 6)
    elif kind == "console":
        a.store(13, 10, 0, 8)
        a.mov(1, 10)
        a.loadi(2, 8)
        a.hypercall(isa.HC_CONSOLE_WRITE)
    elif kind in ("disk_w", "disk_r"):
        a.mov(2, 5)
        a.loadi(3, 1)
        if kind == "disk_w":
            a.mov(1, 8)
            a.hypercall(isa.HC_DISK_WRITE)
        else:
            a.loadi(1, lay["dma_buf"])
            a.hypercall(isa.HC_DISK_READ)
            a.load(6, 1, 0, 8)
            a.add(13, 13, 6)
        a.add(5, 5, 15)
        a.sub(4, 4, 15)
        a.jnz(4, f"s{i}")
        a.loadi(5, 0)
        a.loadi(4, lay["disk_sectors"])
        a.label(f"s{i}")
    elif kind == "yield":
        a.hypercall(isa.HC_YIELD)
        a.add(13, 13, 0)
    elif kind == "vtime":
        a.hypercall(isa.HC_GET_VTIME)
        a.add(13, 13, 0)
    elif kind == "walk":
        a.add(8, 8, 9, lay["stride"])
        a.sub(7, 7, 15)
        a.jnz(7, f"w{i}")
        a.mov(8, 12)
        a.loadi(7, lay["wrap"])
        a.label(f"w{i}")
    else:
        raise ValueError(kind)


def ping_pong(role, rounds, *, data_base=PAGE_SIZE):
    """One side of a two-node exchange over network port 0.

    ``role="ping"`` sends round numbers and waits for each reply;
    ``role="pong"`` echoes each message plus 1000.  Both log every message
    they receive to the console and halt after ``rounds`` exchanges.
    """
    if role not in ("ping", "pong"):
        raise ValueError(role)
    a = Asm()
    _prologue(a, data_base)
    a.loadi(14, rounds)
    a.loadi(10, 0)          # round number
    a.label("top")
    if role == "ping":
        a.store(10, 12, 0, 8)
        _send(a)
    _recv_wait(a)
    a.mov(1, 12)
    a.add(1, 1, 9, 8)
    a.loadi(2, 8)
    a.hypercall(isa.HC_CONSOLE_WRITE)
    if role == "pong":
        a.load(6, 12, 8, 8)
        a.add(6, 6, 9, 1000)
        a.store(6, 12, 0, 8)
        _send(a)
    a.add(10, 10, 15)
    a.sub(14, 14, 15)
    a.jnz(14, "top")
    a.halt()
    return a.build()


def _send(a):
    a.loadi(1, 0)
    a.mov(2, 12)
    a.loadi(3, 8)
    a.hypercall(isa.HC_SEND)


def _recv_wait(a):
    # poll port 0 into data_base+8 until a message arrives
    lbl = f"rx{a.here}"
    a.label(lbl)
    a.loadi(1, 0)
    a.add(2, 12, 9, 8)
    a.loadi(3, 8)
    a.hypercall(isa.HC_RECV)
    a.add(6, 0, 9, 1)
    a.jnz(6, lbl + "_got")
    a.hypercall(isa.HC_YIELD)
    a.jmp(lbl)
    a.label(lbl + "_got")
