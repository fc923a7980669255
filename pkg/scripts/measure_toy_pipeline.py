"""Run the toy pipeline with wall-clock instrumentation and feed the measured
stage costs to the latency model.

The numbers describe numpy on this machine, not the real model; the point is
the instrumentation hook.

    python scripts/measure_toy_pipeline.py [--seed 0] [--duration-s 2.0]
"""

import argparse

from omnistream.latency_sim import StageTimer, critical_path, report, simulate_stream
from omnistream.pipeline import run_demo


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--duration-s", type=float, default=2.0)
    args = ap.parse_args()

    timer = StageTimer()
    result = run_demo(args.seed, args.duration_s, timer=timer)
    profile = timer.to_profile()
    timeline = simulate_stream(profile, len(result.frames))
    for k, v in critical_path(timeline).stages.items():
        print(f"{k:<18} {v:9.3f}")
    summary = report(timeline)
    print(f"first_packet_ms    {summary['first_packet_ms']:9.3f}")
    print(f"rtf                {summary['rtf']:9.4f}")
    print(f"underrun_count     {summary['underrun_count']:9d}")


if __name__ == "__main__":
    main()
