"""Print first-packet latency and RTF for every bundled profile next to the published numbers.

Also shows what asynchronous thinker/talker chunk prefill buys when the input
arrives in several chunks.

    python scripts/reproduce_latency_table.py [--profile PATH] [--chunks 4]
"""

import argparse

from omnistream.latency_sim import (
    DEFAULT_PROFILE_PATH,
    critical_path,
    first_packet_latency,
    load_profiles,
    rtf,
    simulate_stream,
)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--profile", default=DEFAULT_PROFILE_PATH)
    ap.add_argument("--chunks", type=int, default=4)
    args = ap.parse_args()

    profiles = load_profiles(args.profile)
    print(f"{'profile':<10} {'stages (ms)':<28} {'total':>7} {'reported':>8} {'delta':>6} {'rtf':>6} {'reported':>8}")
    for key in sorted(profiles, key=lambda k: (k[1], k[0])):
        p = profiles[key]
        stages = "/".join(f"{v:g}" for v in critical_path(simulate_stream(p, 1)).stages.values())
        total = first_packet_latency(p)
        print(f"{p.modality + '/' + str(p.concurrency):<10} {stages:<28} {total:7g} "
              f"{p.reported_total_ms:8g} {total - p.reported_total_ms:+6g} {rtf(p):6.3f} {p.reported_rtf:8.2f}")

    print(f"\nprefill over {args.chunks} input chunks: sequential vs asynchronous first packet (ms)")
    for key in sorted(profiles, key=lambda k: (k[1], k[0])):
        p = profiles[key]
        seq = simulate_stream(p, 1, asynchronous=False, n_chunks=args.chunks).first_packet_ms
        asy = simulate_stream(p, 1, asynchronous=True, n_chunks=args.chunks).first_packet_ms
        print(f"{p.modality + '/' + str(p.concurrency):<10} {seq:8.1f} {asy:8.1f}  saved {seq - asy:7.1f}")


if __name__ == "__main__":
    main()
