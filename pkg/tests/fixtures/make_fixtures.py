"""Regenerate the golden images and frozen oracle values in this directory.

    python3 tests/fixtures/make_fixtures.py

The oracle values come from tests/oracles.py only; the images are written
by the codec under test at a fixed timestamp so that re-running this
script reproduces them bit for bit.  Commit the output; the test suite
never rewrites it.
"""

import hashlib
import json
import sys
from pathlib import Path
from unittest import mock

HERE = Path(__file__).resolve().parent
sys.path.insert(0, str(HERE.parent))

from oracles import crc32_bitwise, deflate_zero_bound, timer_fires  # noqa: E402

from gckpt.ckpt_engine import engine  # noqa: E402
from gckpt.ckpt_engine.image import ImageParts, Section, SectionType, write_image  # noqa: E402
from gckpt.ckpt_engine.session import Session  # noqa: E402
from gckpt.driver_api import Driver  # noqa: E402
from gckpt.guest_vm import isa  # noqa: E402
from gckpt.guest_vm.isa import Asm  # noqa: E402

FIXED_TIME = 1_700_000_000.0


def golden_program():
    """Counts to 400, printing a byte every 50 steps of the counter."""
    a = Asm()
    a.loadi(15, 1)
    a.loadi(9, 0)
    a.loadi(14, 400)
    a.loadi(12, 4096)
    a.label("top")
    a.add(1, 1, 15)
    a.store(1, 12, 0, 8)
    a.add(7, 7, 15)
    a.loadi(6, 50)
    a.sub(6, 7, 6)
    a.jnz(6, "skip")
    a.loadi(7, 0)
    a.add(2, 1, 9, 0x30)
    a.store(2, 12, 8, 1)
    a.add(1, 12, 9, 8)
    a.loadi(2, 1)
    a.hypercall(isa.HC_CONSOLE_WRITE)
    a.load(1, 12, 0, 8)
    a.label("skip")
    a.hypercall(isa.HC_YIELD)
    a.sub(14, 14, 15)
    a.jnz(14, "top")
    a.halt()
    return a.build()


def synthetic_parts():
    return ImageParts(1, [
        Section(SectionType.MANIFEST, "manifest", b'{"engine":"gckpt/1","golden":true}'),
        Section(SectionType.MEMORY, "ram", bytes(range(256)) * 16 + bytes(4096)),
        Section(SectionType.DEVICE, "device", b"\x00" * 40),
        Section(SectionType.PLUGIN_BLOB, "vmdriver", b"\x01\x02\x03"),
        Section(SectionType.PLUGIN_BLOB, "", b""),
        Section(SectionType.LAUNCH_LOG, "launch", b"[]"),
        Section(SectionType.DISK_SNAPSHOT_REF, "disk", b"\x00" * 43),
        Section(SectionType.DELTA_INDEX, "délta", b"\xff" * 36),
    ])


def build(out=HERE):
    out = Path(out)
    files = {}
    with mock.patch("time.time", return_value=FIXED_TIME):
        s = Session.launch(golden_program(), 16 * 1024, pit_period=64, driver=Driver(),
                           name="golden")
        s.run(1500)
        files["golden_default.gckp"] = engine.checkpoint(s, out / "golden_default.gckp")
        s.run(700)
        files["golden_delta.gckp"] = engine.checkpoint(s, out / "golden_delta.gckp",
                                                       mode="incremental")
        files["golden_fast.gckp"] = engine.checkpoint(s, out / "golden_fast.gckp", mode="fast")
        s.run_to_halt()
        final_console = bytes(s.machine.console_out)
        final_icount = s.machine.instr_count
        final_mem = hashlib.sha256(bytes(s.machine.memory)).hexdigest()
        s.close()
    (out / "golden_synthetic.gckp").write_bytes(write_image(synthetic_parts()))
    files["golden_synthetic.gckp"] = out / "golden_synthetic.gckp"

    oracle = {
        "crc32_check_123456789": crc32_bitwise(b"123456789"),
        "deflate_zero_bound_1MiB": deflate_zero_bound(1 << 20),
        "timer_fires_period1000_10000": timer_fires(0, 10_000, 1000),
        "timer_fires_period1000_5000": timer_fires(0, 5000, 1000),
        "sha256_empty": hashlib.sha256(b"").hexdigest(),
        "golden_final": {
            "console_hex": final_console.hex(),
            "instr_count": final_icount,
            "memory_sha256": final_mem,
        },
        "golden_sha256": {name: hashlib.sha256(Path(p).read_bytes()).hexdigest()
                          for name, p in sorted(files.items())},
    }
    (out / "oracle_values.json").write_text(json.dumps(oracle, indent=2, sort_keys=True) + "\n")
    return oracle


if __name__ == "__main__":
    print(json.dumps(build(), indent=2))
