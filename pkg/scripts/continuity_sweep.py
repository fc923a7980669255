"""Sweep per-frame generation cost across RTF = 1 and count playback underruns.

    python scripts/continuity_sweep.py [--frames 500]
"""

import argparse
import dataclasses

import numpy as np

from omnistream.latency_sim import load_profiles, rtf, simulate_stream


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--frames", type=int, default=500)
    args = ap.parse_args()

    base = load_profiles()[("audio", 1)]
    print(f"{'mtp_ms':>7} {'rtf':>6} {'underruns':>9} {'stall_ms':>10}")
    for mtp in np.linspace(1, 80, 17):
        p = dataclasses.replace(base, mtp_per_token_ms=float(mtp))
        tl = simulate_stream(p, args.frames)
        print(f"{mtp:7.1f} {rtf(p):6.3f} {tl.underrun_count:9d} {tl.stall_ms:10.1f}")


if __name__ == "__main__":
    main()
