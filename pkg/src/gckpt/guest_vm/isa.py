"""Instruction set of the sandbox guest and a tiny label-resolving assembler.

Every instruction is 8 bytes, little-endian::

    byte 0    opcode
    byte 1    a   (destination / value register)
    byte 2    b   (source / base register)
    byte 3    c   (second source register, or access width for LOAD/STORE)
    byte 4-7  imm (signed 32-bit)

Register semantics per opcode:

    LOADI a, imm          a = sign_extend(imm)
    MOV   a, b            a = b
    ADD   a, b, c [imm]   a = b + c + imm            (mod 2**64)
    SUB   a, b, c         a = b - c                  (mod 2**64)
    MUL   a, b, c         a = b * c                  (mod 2**64)
    LOAD  a, [b+imm], w   a = zero_extend(mem[b+imm : b+imm+w])
    STORE a, [b+imm], w   mem[b+imm : b+imm+w] = low w bytes of a
    JMP   imm             pc = imm
    JNZ   a, imm          if a != 0: pc = imm
    HYPERCALL imm         service request `imm`, arguments in r1..r3, result in r0
    HALT

Hypercalls:

    CONSOLE_WRITE  r1=addr r2=len                 -> r0=len
    DISK_READ      r1=addr r2=sector r3=count     -> r0=0
    DISK_WRITE     r1=addr r2=sector r3=count     -> r0=0
    GET_VTIME                                     -> r0=instr_count
    YIELD          acknowledge lowest pending unmasked IRQ line
                                                  -> r0=line, or NONE
    SEND           r1=out port r2=addr r3=len     -> r0=len
    RECV           r1=in port  r2=addr r3=maxlen  -> r0=len, or NONE if empty
"""

import struct

INSN_SIZE = 8
INSN = struct.Struct("<BBBBi")

MASK64 = (1 << 64) - 1
NONE = MASK64  # "nothing available" result of YIELD / RECV

# opcode 0 is deliberately illegal so that executing zeroed memory faults
LOADI = 0x01
MOV = 0x02
ADD = 0x03
SUB = 0x04
MUL = 0x05
LOAD = 0x06
STORE = 0x07
JMP = 0x08
JNZ = 0x09
HYPERCALL = 0x0A
HALT = 0x0B

OPCODE_NAMES = {
    LOADI: "LOADI", MOV: "MOV", ADD: "ADD", SUB: "SUB", MUL: "MUL",
    LOAD: "LOAD", STORE: "STORE", JMP: "JMP", JNZ: "JNZ",
    HYPERCALL: "HYPERCALL", HALT: "HALT",
}

HC_CONSOLE_WRITE = 1
HC_DISK_READ = 2
HC_DISK_WRITE = 3
HC_GET_VTIME = 4
HC_YIELD = 5
HC_SEND = 6
HC_RECV = 7

WIDTHS = (1, 2, 4, 8)


def encode(op, a=0, b=0, c=0, imm=0):
    return INSN.pack(op, a, b, c, imm)


def decode(raw, offset=0):
    """Return ``(op, a, b, c, imm)`` for the instruction at ``offset``."""
    return INSN.unpack_from(raw, offset)


def loadi(rd, imm):
    return encode(LOADI, rd, 0, 0, imm)


def mov(rd, rs):
    return encode(MOV, rd, rs)


def add(rd, rs, rt, imm=0):
    return encode(ADD, rd, rs, rt, imm)


def sub(rd, rs, rt):
    return encode(SUB, rd, rs, rt)


def mul(rd, rs, rt):
    return encode(MUL, rd, rs, rt)


def load(rd, base, offset=0, width=8):
    return encode(LOAD, rd, base, width, offset)


def store(rs, base, offset=0, width=8):
    return encode(STORE, rs, base, width, offset)


def jmp(target):
    return encode(JMP, 0, 0, 0, target)


def jnz(rs, target):
    return encode(JNZ, rs, 0, 0, target)


def hypercall(sub_op):
    return encode(HYPERCALL, 0, 0, 0, sub_op)


def halt():
    return encode(HALT)


class Asm:
    """Accumulates instructions; jump targets may be label names.

    >>> a = Asm()
    >>> a.loadi(0, 3); a.label("top"); a.sub(0, 0, 15); a.jnz(0, "top"); a.halt()
    >>> len(a.build())
    40
    """

    def __init__(self, origin=0):
        self.origin = origin
        self._items = []
        self._labels = {}

    @property
    def here(self):
        return self.origin + INSN_SIZE * len(self._items)

    def label(self, name):
        if name in self._labels:
            raise ValueError(f"duplicate label {name!r}")
        self._labels[name] = self.here

    def emit(self, op, a=0, b=0, c=0, imm=0):
        self._items.append((op, a, b, c, imm))

    def loadi(self, rd, imm):
        self.emit(LOADI, rd, 0, 0, imm)

    def mov(self, rd, rs):
        self.emit(MOV, rd, rs)

    def add(self, rd, rs, rt, imm=0):
        self.emit(ADD, rd, rs, rt, imm)

    def sub(self, rd, rs, rt):
        self.emit(SUB, rd, rs, rt)

    def mul(self, rd, rs, rt):
        self.emit(MUL, rd, rs, rt)

    def load(self, rd, base, offset=0, width=8):
        self.emit(LOAD, rd, base, width, offset)

    def store(self, rs, base, offset=0, width=8):
        self.emit(STORE, rs, base, width, offset)

    def jmp(self, target):
        self.emit(JMP, 0, 0, 0, target)

    def jnz(self, rs, target):
        self.emit(JNZ, rs, 0, 0, target)

    def hypercall(self, sub_op):
        self.emit(HYPERCALL, 0, 0, 0, sub_op)

    def halt(self):
        self.emit(HALT)

    def build(self):
        out = bytearray()
        for op, a, b, c, imm in self._items:
            if isinstance(imm, str):
                try:
                    imm = self._labels[imm]
                except KeyError:
                    raise ValueError(f"undefined label {imm!r}") from None
            out += INSN.pack(op, a, b, c, imm)
        return bytes(out)


def disassemble(code):
    lines = []
    for off in range(0, len(code) - len(code) % INSN_SIZE, INSN_SIZE):
        op, a, b, c, imm = INSN.unpack_from(code, off)
        name = OPCODE_NAMES.get(op, f"?{op:#x}")
        lines.append(f"{off:#06x}: {name} a={a} b={b} c={c} imm={imm}")
    return "\n".join(lines)
