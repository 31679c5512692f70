"""Independent reference implementations used as test oracles.

Nothing here imports the code under test except for the ISA constants
(opcode numbers are data, not behaviour).  Each oracle is written the
slow, obvious way.
"""

import struct

from gckpt.guest_vm import isa

M64 = (1 << 64) - 1


# -- CRC-32 -------------------------------------------------------------------

def crc32_bitwise(data, crc=0):
    """Reflected CRC-32, polynomial 0xEDB88320, one bit at a time."""
    crc ^= 0xFFFFFFFF
    for byte in data:
        crc ^= byte
        for _ in range(8):
            crc = (crc >> 1) ^ (0xEDB88320 if crc & 1 else 0)
    return crc ^ 0xFFFFFFFF


# -- RFC 1951 inflate ---------------------------------------------------------

_LEN_BASE = [3, 4, 5, 6, 7, 8, 9, 10, 11, 13, 15, 17, 19, 23, 27, 31, 35, 43, 51, 59,
             67, 83, 99, 115, 131, 163, 195, 227, 258]
_LEN_EXTRA = [0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2, 3, 3, 3, 3, 4, 4, 4, 4,
              5, 5, 5, 5, 0]
_DIST_BASE = [1, 2, 3, 4, 5, 7, 9, 13, 17, 25, 33, 49, 65, 97, 129, 193, 257, 385, 513,
              769, 1025, 1537, 2049, 3073, 4097, 6145, 8193, 12289, 16385, 24577]
_DIST_EXTRA = [0, 0, 0, 0, 1, 1, 2, 2, 3, 3, 4, 4, 5, 5, 6, 6, 7, 7, 8, 8, 9, 9, 10, 10,
               11, 11, 12, 12, 13, 13]
_CL_ORDER = [16, 17, 18, 0, 8, 7, 9, 6, 10, 5, 11, 4, 12, 3, 13, 2, 14, 1, 15]


class _Bits:
    def __init__(self, data):
        self.data = data
        self.pos = 0  # bit position

    def bit(self):
        byte = self.data[self.pos >> 3]  # IndexError on truncation
        b = (byte >> (self.pos & 7)) & 1
        self.pos += 1
        return b

    def bits(self, n):
        v = 0
        for i in range(n):
            v |= self.bit() << i
        return v

    def align(self):
        self.pos = (self.pos + 7) & ~7


def _huffman(lengths):
    """Canonical code -> {(length, code): symbol}."""
    table = {}
    code = 0
    for length in range(1, 16):
        for sym, ln in enumerate(lengths):
            if ln == length:
                table[(length, code)] = sym
                code += 1
        code <<= 1
    return table


def _decode(bits, table):
    code = 0
    for length in range(1, 16):
        code = (code << 1) | bits.bit()
        sym = table.get((length, code))
        if sym is not None:
            return sym
    raise ValueError("bad Huffman code")


_FIXED_LIT = _huffman([8] * 144 + [9] * 112 + [7] * 24 + [8] * 8)
_FIXED_DIST = _huffman([5] * 30)


def inflate_reference(data):
    """Decode a raw DEFLATE stream; raises on malformed input."""
    bits = _Bits(data)
    out = bytearray()
    final = 0
    while not final:
        final = bits.bit()
        btype = bits.bits(2)
        if btype == 0:
            bits.align()
            p = bits.pos >> 3
            ln, nln = struct.unpack_from("<HH", data, p)
            if ln ^ nln != 0xFFFF:
                raise ValueError("stored block length check failed")
            out += data[p + 4:p + 4 + ln]
            if p + 4 + ln > len(data):
                raise ValueError("truncated stored block")
            bits.pos = (p + 4 + ln) * 8
            continue
        if btype == 1:
            lit, dist = _FIXED_LIT, _FIXED_DIST
        elif btype == 2:
            hlit = bits.bits(5) + 257
            hdist = bits.bits(5) + 1
            hclen = bits.bits(4) + 4
            cl = [0] * 19
            for i in range(hclen):
                cl[_CL_ORDER[i]] = bits.bits(3)
            cl_table = _huffman(cl)
            lengths = []
            while len(lengths) < hlit + hdist:
                sym = _decode(bits, cl_table)
                if sym < 16:
                    lengths.append(sym)
                elif sym == 16:
                    lengths += [lengths[-1]] * (3 + bits.bits(2))
                elif sym == 17:
                    lengths += [0] * (3 + bits.bits(3))
                else:
                    lengths += [0] * (11 + bits.bits(7))
            lit = _huffman(lengths[:hlit])
            dist = _huffman(lengths[hlit:])
        else:
            raise ValueError("reserved block type")
        while True:
            sym = _decode(bits, lit)
            if sym < 256:
                out.append(sym)
            elif sym == 256:
                break
            else:
                i = sym - 257
                length = _LEN_BASE[i] + bits.bits(_LEN_EXTRA[i])
                d = _decode(bits, dist)
                distance = _DIST_BASE[d] + bits.bits(_DIST_EXTRA[d])
                if distance > len(out):
                    raise ValueError("distance too far back")
                for _ in range(length):
                    out.append(out[-distance])
    return bytes(out)


def deflate_zero_bound(n):
    """Upper bound on a good raw-DEFLATE encoding of ``n`` zero bytes.

    One literal, then back-references of length 258 at distance 1.  With the
    fixed Huffman code each costs 8 bits (length symbol 285) plus 5 bits
    (distance symbol 0); add one 9-bit tail reference, the block header and
    end-of-block code, then round up to bytes.
    """
    refs = -(-(n - 1) // 258)
    bits = 3 + 8 + refs * 13 + 9 + 7
    return -(-bits // 8)


# -- guest reference interpreter --------------------------------------------

class RefMachine:
    """Straight transcription of the ISA description, no caches or fast paths."""

    def __init__(self, code, mem_size, *, pit_period=0, pit_line=0, irq_mask=0):
        self.mem = bytearray(mem_size)
        self.mem[:len(code)] = code
        self.regs = [0] * 16
        self.pc = 0
        self.icount = 0
        self.console = bytearray()
        self.pending = 0
        self.mask = irq_mask
        self.acked = 0
        self.pit_period = pit_period
        self.pit_line = pit_line
        self.halted = False
        self.faulted = False
        self.dirty = set()

    def _check(self, addr, n, align=False):
        if addr < 0 or addr + n > len(self.mem):
            raise IndexError
        if align and addr % n:
            raise IndexError

    def run(self, budget):
        steps = 0
        while steps < budget and not self.halted:
            if self.pit_period and self.icount % self.pit_period == 0:
                self.pending |= 1 << self.pit_line
            try:
                self._check(self.pc, 8, align=True)
                op, a, b, c, imm = struct.unpack_from("<BBBBi", self.mem, self.pc)
                nxt = self.pc + 8
                r = self.regs
                if op == isa.LOADI:
                    r[a] = imm & M64
                elif op == isa.MOV:
                    r[a] = r[b]
                elif op == isa.ADD:
                    r[a] = (r[b] + r[c] + imm) & M64
                elif op == isa.SUB:
                    r[a] = (r[b] - r[c]) & M64
                elif op == isa.MUL:
                    r[a] = (r[b] * r[c]) & M64
                elif op in (isa.LOAD, isa.STORE):
                    if c not in (1, 2, 4, 8):
                        raise IndexError
                    addr = (r[b] + imm) & M64
                    self._check(addr, c, align=True)
                    if op == isa.LOAD:
                        r[a] = int.from_bytes(self.mem[addr:addr + c], "little")
                    else:
                        self.mem[addr:addr + c] = (r[a] % (1 << 8 * c)).to_bytes(c, "little")
                        self.dirty.add(addr // 4096)
                elif op == isa.JMP:
                    nxt = imm
                elif op == isa.JNZ:
                    if r[a] != 0:
                        nxt = imm
                elif op == isa.HYPERCALL:
                    self._hypercall(imm)
                elif op == isa.HALT:
                    self.halted = True
                else:
                    raise IndexError
            except IndexError:
                self.halted = True
                self.faulted = True
                return steps
            self.pc = nxt
            self.icount += 1
            steps += 1
        return steps

    def _hypercall(self, sub):
        r = self.regs
        if sub == isa.HC_CONSOLE_WRITE:
            self._check(r[1], r[2])
            self.console += self.mem[r[1]:r[1] + r[2]]
            r[0] = r[2]
        elif sub == isa.HC_GET_VTIME:
            r[0] = self.icount
        elif sub == isa.HC_YIELD:
            live = self.pending & ~self.mask & 0xFFFFFFFF
            if live == 0:
                r[0] = M64
            else:
                line = 0
                while not live >> line & 1:
                    line += 1
                self.pending &= ~(1 << line)
                self.acked += 1
                r[0] = line
        else:
            raise IndexError


def timer_fires(start, steps, period):
    """Timer assertions in ``steps`` instructions from virtual time ``start``."""
    return sum(1 for t in range(start, start + steps) if t % period == 0)
