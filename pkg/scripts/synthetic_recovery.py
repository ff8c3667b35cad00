"""Noise sweep on the synthetic world: cross-validated R2/RMSE per indicator.

    python scripts/synthetic_recovery.py --out /tmp/sweep --noise 0 0.05 0.1 0.2
"""
import argparse
import time
from pathlib import Path

from washmap import io as wio
from washmap import pipeline
from washmap.config import load_config, with_overrides, write_config_toml
from washmap.synth import SynthConfig, generate_world


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--noise", type=float, nargs="+", default=[0.0, 0.05, 0.1, 0.2])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int)
    args = ap.parse_args()

    print(f"{'noise':>6} {'indicator':>9} {'R2':>8} {'RMSE':>8} {'seconds':>8}")
    for noise in args.noise:
        root = args.out / f"noise_{noise:g}"
        manifest = generate_world(root, SynthConfig(noise=noise, seed=args.seed))
        write_config_toml(root / "config.toml", manifest.name, out="run", seed=args.seed)
        cfg = with_overrides(load_config(root / "config.toml"), threads=args.threads)
        t0 = time.perf_counter()
        for stage in ("features", "aggregate", "train", "evaluate"):
            pipeline.RUNNERS[stage](cfg)
        secs = time.perf_counter() - t0
        for ind, rep in sorted(wio.read_metrics_json(cfg.out / "metrics" / "metrics.json").items()):
            print(f"{noise:6.3f} {ind:>9} {rep.mean_r_squared:8.4f} {rep.mean_rmse:8.4f} {secs:8.1f}")


if __name__ == "__main__":
    main()
