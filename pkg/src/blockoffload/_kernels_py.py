"""Pure-Python twins of the compiled kernels (selected when the extension is absent)."""
import struct

_MASK = (1 << 64) - 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_HDR = struct.Struct("<QBI")


def transform_digest(data, stride, window):
    if stride < 1 or window < 1:
        raise ValueError("stride and window must be >= 1")
    down = bytes(data)[::stride]
    m = len(down)
    h1 = _FNV_OFFSET
    h2 = 0
    for w0 in range(0, m, window):
        for b in down[w0:w0 + window][::-1]:
            h1 = ((h1 ^ b) * _FNV_PRIME) & _MASK
            h2 = (h2 * 31 + b + 1) & _MASK
    return struct.pack("<QQ", h1, h2), m


def decode_entries(buf, start, end):
    buf = memoryview(buf)
    if end > len(buf):
        raise ValueError("entry range exceeds buffer")
    out = []
    pos = start
    while pos < end:
        if pos + 2 > end:
            raise ValueError("truncated entry header")
        klen = buf[pos] | (buf[pos + 1] << 8)
        pos += 2
        if pos + klen + 13 > end:
            raise ValueError("truncated entry")
        key = bytes(buf[pos:pos + klen])
        pos += klen
        seq, op, vlen = _HDR.unpack_from(buf, pos)
        pos += 13
        if pos + vlen > end:
            raise ValueError("truncated value")
        out.append((key, seq, op, bytes(buf[pos:pos + vlen])))
        pos += vlen
    return out
