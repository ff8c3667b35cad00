"""Wall time of each pipeline stage on the default synthetic world.

    python scripts/stage_timings.py --out /tmp/timing --threads 4
"""
import argparse
import os
import time
from pathlib import Path

from washmap import pipeline
from washmap.config import load_config, with_overrides, write_config_toml
from washmap.synth import SynthConfig, generate_world


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--threads", type=int)
    args = ap.parse_args()

    manifest = generate_world(args.out, SynthConfig())
    write_config_toml(args.out / "config.toml", manifest.name)
    cfg = with_overrides(load_config(args.out / "config.toml"), threads=args.threads)
    total = 0.0
    for stage in pipeline.STAGES:
        t0 = time.perf_counter()
        pipeline.RUNNERS[stage](cfg)
        dt = time.perf_counter() - t0
        total += dt
        print(f"{stage:<10} {dt:7.2f} s")
    print(f"{'total':<10} {total:7.2f} s  ({args.threads or os.cpu_count()} threads)")


if __name__ == "__main__":
    main()
