# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops. Must stay bit-identical to ``_kernels_py``."""

from libc.stdint cimport uint8_t, uint16_t, uint32_t, uint64_t
from libc.string cimport memcpy

cdef uint64_t FNV_OFFSET = 0xcbf29ce484222325ULL
cdef uint64_t FNV_PRIME = 0x100000001b3ULL


def transform_digest(const uint8_t[::1] data, Py_ssize_t stride, Py_ssize_t window):
    """Downsample by ``stride``, reverse each ``window``-byte run, hash the result.

    Returns ``(digest, output_len)`` with a 16-byte digest.
    """
    if stride < 1 or window < 1:
        raise ValueError("stride and window must be >= 1")
    cdef Py_ssize_t n = data.shape[0]
    cdef Py_ssize_t m = (n + stride - 1) // stride
    cdef Py_ssize_t w0, w1, i
    cdef uint64_t h1 = FNV_OFFSET
    cdef uint64_t h2 = 0
    cdef uint8_t b
    w0 = 0
    while w0 < m:
        w1 = w0 + window
        if w1 > m:
            w1 = m
        i = w1 - 1
        while i >= w0:
            b = data[i * stride]
            h1 = (h1 ^ b) * FNV_PRIME
            h2 = h2 * 31 + b + 1
            i -= 1
        w0 = w1
    cdef bytearray out = bytearray(16)
    cdef uint8_t* p = out
    memcpy(p, &h1, 8)
    memcpy(p + 8, &h2, 8)
    return bytes(out), m


cdef inline uint64_t _u64(const uint8_t[::1] buf, Py_ssize_t at):
    cdef uint64_t v = 0
    cdef int k
    for k in range(7, -1, -1):
        v = (v << 8) | buf[at + k]
    return v


def decode_entries(const uint8_t[::1] buf, Py_ssize_t start, Py_ssize_t end):
    """Parse ``[u16 klen][key][u64 seq][u8 op][u32 vlen][value]`` frames in ``buf[start:end]``."""
    cdef list out = []
    cdef Py_ssize_t pos = start
    cdef Py_ssize_t klen, vlen
    cdef uint64_t seq
    cdef uint8_t op
    if end > buf.shape[0]:
        raise ValueError("entry range exceeds buffer")
    while pos < end:
        if pos + 2 > end:
            raise ValueError("truncated entry header")
        klen = buf[pos] | (<Py_ssize_t>buf[pos + 1] << 8)
        pos += 2
        if pos + klen + 13 > end:
            raise ValueError("truncated entry")
        key = bytes(buf[pos:pos + klen])
        pos += klen
        seq = _u64(buf, pos)
        pos += 8
        op = buf[pos]
        pos += 1
        vlen = (buf[pos] | (<Py_ssize_t>buf[pos + 1] << 8)
                | (<Py_ssize_t>buf[pos + 2] << 16) | (<Py_ssize_t>buf[pos + 3] << 24))
        pos += 4
        if pos + vlen > end:
            raise ValueError("truncated value")
        value = bytes(buf[pos:pos + vlen])
        pos += vlen
        out.append((key, seq, op, value))
    return out
