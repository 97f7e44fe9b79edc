"""``bench`` command line: format volumes, serve a target, run experiments."""
from __future__ import annotations

import argparse
import logging
import os
import sys
import threading

from blockoffload.bench.experiments import EXPERIMENTS, BenchConfig, run_experiment
from blockoffload.bench.metrics import to_csv
from blockoffload.cluster import register_all_stubs
from blockoffload.extentfs import ExtentFS
from blockoffload.offload_engine import EngineConfig, OffloadEngine
from blockoffload.transport import NodeService, serve
from blockoffload.volume import FileVolume, MemoryVolume, VolumeGeometry

log = logging.getLogger("blockoffload.bench")


def open_volume(spec: str, blocks: int | None, block_size: int, create: bool, volume_id: int = 0):
    """``mem`` gives a fresh in-memory volume; anything else is a backing file path."""
    if spec == "mem":
        if not blocks:
            raise SystemExit("an in-memory volume needs --blocks")
        return MemoryVolume(VolumeGeometry(block_size, blocks), volume_id=volume_id)
    if not create:
        size = os.path.getsize(spec)
        if size % block_size:
            raise SystemExit(f"{spec}: size {size} is not a multiple of {block_size}")
        blocks = size // block_size
    if not blocks:
        raise SystemExit("creating a volume needs --blocks")
    return FileVolume(spec, VolumeGeometry(block_size, blocks), create=create, volume_id=volume_id)


def cmd_mkfs(args) -> int:
    vol = open_volume(args.vol, args.blocks, args.block_size, create=True)
    fs = ExtentFS.mkfs(vol)
    print(f"formatted {args.vol}: {vol.block_count} blocks of {vol.block_size} B, "
          f"{fs.space.free} free")
    vol.close()
    return 0


def cmd_target(args) -> int:
    cfg = EngineConfig.load(args.config) if args.config else EngineConfig()
    vols = [open_volume(v, args.blocks, args.block_size, create=False, volume_id=i)
            for i, v in enumerate(args.vol or [])]
    engine = OffloadEngine.from_config(cfg, vols)
    register_all_stubs(engine)
    service = NodeService({v.volume_id: v for v in vols}, engine=engine)
    host, _, port = args.listen.rpartition(":")
    server = serve(service, host or "127.0.0.1", int(port), background=True)
    addr = "%s:%d" % server.server_address[:2]
    print(f"serving {len(vols)} volume(s) on {addr} with policy {cfg.policy}", flush=True)
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
        server.server_close()
    return 0


def cmd_run(args) -> int:
    cfg = BenchConfig.load(args.config) if args.config else BenchConfig()
    rows = run_experiment(args.experiment, cfg, args.seed)
    text = to_csv(rows)
    if args.out and args.out != "-":
        with open(args.out, "w") as fh:
            fh.write(text)
        log.info("wrote %d rows to %s", len(rows), args.out)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bench", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    m = sub.add_parser("mkfs", help="format a volume")
    m.add_argument("--vol", required=True, help="backing file path, or 'mem'")
    m.add_argument("--blocks", type=int, required=True)
    m.add_argument("--block-size", type=int, default=4096)
    m.set_defaults(func=cmd_mkfs)

    t = sub.add_parser("target", help="serve volumes and an offload engine over TCP")
    t.add_argument("--config", help="engine config file (key = value lines)")
    t.add_argument("--listen", default="127.0.0.1:7070")
    t.add_argument("--vol", action="append", help="volume to serve (repeatable): file path or 'mem'")
    t.add_argument("--blocks", type=int, help="block count for 'mem' volumes")
    t.add_argument("--block-size", type=int, default=4096)
    t.set_defaults(func=cmd_target)

    r = sub.add_parser("run", help="run an experiment and write CSV")
    r.add_argument("--experiment", required=True, choices=sorted(EXPERIMENTS))
    r.add_argument("--config", help="bench config file (key = value lines)")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", default="-", help="CSV path, '-' for stdout")
    r.set_defaults(func=cmd_run)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
