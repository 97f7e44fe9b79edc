"""Time the compiled kernels against the pure-Python fallback.

Each backend runs in a fresh interpreter so the BLOCKOFFLOAD_PURE switch takes
effect. Usage: python3 benchmarks/bench_kernels.py [--size BYTES] [--repeat N]
"""
import argparse
import os
import subprocess
import sys

CHILD = r"""
import random, struct, sys, timeit
from blockoffload import kernels
size, repeat = int(sys.argv[1]), int(sys.argv[2])
rng = random.Random(1)
data = rng.randbytes(size)
entries = bytearray()
while len(entries) < size:
    key, value = rng.randbytes(24), rng.randbytes(100)
    entries += struct.pack("<H", len(key)) + key + struct.pack("<QBI", 1, 0, len(value)) + value
entries = bytes(entries)
t1 = min(timeit.repeat(lambda: kernels.transform_digest(data, 1, 64), number=1, repeat=repeat))
t2 = min(timeit.repeat(lambda: kernels.decode_entries(entries, 0, len(entries)), number=1, repeat=repeat))
print(kernels.BACKEND, t1, t2)
"""


def run(pure: bool, size: int, repeat: int) -> tuple[str, float, float]:
    env = dict(os.environ)
    env.pop("BLOCKOFFLOAD_PURE", None)
    if pure:
        env["BLOCKOFFLOAD_PURE"] = "1"
    out = subprocess.run([sys.executable, "-c", CHILD, str(size), str(repeat)], env=env,
                         capture_output=True, text=True, check=True).stdout.split()
    return out[0], float(out[1]), float(out[2])


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--size", type=int, default=1 << 20)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    rows = [run(False, args.size, args.repeat), run(True, args.size, args.repeat)]
    mb = args.size / 1e6
    print(f"{'backend':8} {'transform MB/s':>15} {'decode MB/s':>12}")
    for name, t1, t2 in rows:
        print(f"{name:8} {mb / t1:15.1f} {mb / t2:12.1f}")
    if rows[0][0] == "cython":
        print(f"speedup  {rows[1][1] / rows[0][1]:15.1f}x {rows[1][2] / rows[0][2]:11.1f}x")


if __name__ == "__main__":
    main()
