"""Command-line entry point.

Exit codes: 0 success, 1 assertion/tolerance failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

from . import __version__
from .audio_frontend import AudioEncoder, read_wav, write_wav
from .code2wav import Code2Wav, RendererConfig
from .latency_sim import (
    DEFAULT_PROFILE_PATH,
    check_against_reported,
    load_profiles,
    report,
    report_csv,
    simulate_stream,
)
from .pipeline import BoundaryMismatch, make_manifest, manifest_line, run_demo
from .talker_stream import frames_from_csv, frames_to_csv
from .tmrope import assign_positions, parse_segments

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _write_text(path: str, text: str):
    if path == "-":
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)


def positions_csv(triples, comment: str | None = None) -> str:
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "t", "h", "w"])
    for i, p in enumerate(triples):
        w.writerow([i, p.t, p.h, p.w])
    return buf.getvalue()


def cmd_simulate(args) -> int:
    path = Path(args.profile) if args.profile else DEFAULT_PROFILE_PATH
    if not path.exists():
        raise UsageError(f"profile file not found: {path}")
    profiles = load_profiles(path)
    key = (args.modality, args.concurrency)
    if key not in profiles:
        raise UsageError(f"profile key not found: modality={key[0]} concurrency={key[1]}")
    profile = profiles[key]
    timeline = simulate_stream(profile, args.n_frames, args.asynchronous, args.n_chunks)
    summary = report(timeline)
    manifest = make_manifest(
        "simulate", profile=path.name, modality=args.modality, concurrency=args.concurrency,
        n_frames=args.n_frames, asynchronous=args.asynchronous, n_chunks=args.n_chunks, seed=args.seed,
    )
    for k, v in summary.items():
        print(f"{k}={v}")
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "breakdown.csv").write_text(report_csv([summary], manifest_line(manifest)))
        (out / "summary.json").write_text(
            json.dumps({"manifest": manifest, "summary": summary}, indent=2, sort_keys=True) + "\n"
        )
    if args.check:
        failures = check_against_reported(profile, args.total_tol_ms, args.rtf_tol)
        for f in failures:
            print(f"CHECK FAIL: {f}", file=sys.stderr)
        print("check=" + ("fail" if failures else "pass"))
        return EXIT_FAIL if failures else EXIT_OK
    return EXIT_OK


def cmd_demo(args) -> int:
    try:
        result = run_demo(args.seed, args.duration_s, args.window_s)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    except BoundaryMismatch as exc:
        print(f"demo failed at boundary {exc.boundary}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = dict(result.manifest, outputs=["demo.wav", "frames.csv", "positions.csv"])
    line = manifest_line(manifest)
    write_wav(out / "demo.wav", result.waveform, result.sample_rate, comment=line)
    (out / "frames.csv").write_text(frames_to_csv(result.frames, line))
    (out / "positions.csv").write_text(positions_csv(result.positions, line))
    print(f"frames={len(result.frames)} samples={result.waveform.size} sample_rate={result.sample_rate}")
    print(f"wrote {out / 'demo.wav'}, {out / 'frames.csv'}, {out / 'positions.csv'}")
    return EXIT_OK


def cmd_rope_dump(args) -> int:
    text = sys.stdin.read() if args.input == "-" else Path(args.input).read_text()
    try:
        triples = assign_positions(parse_segments(text), args.start_id)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    comment = manifest_line(make_manifest("rope-dump", start_id=args.start_id, seed=args.seed))
    _write_text(args.out, positions_csv(triples, None if args.no_manifest else comment))
    return EXIT_OK


def cmd_frontend(args) -> int:
    try:
        samples = read_wav(args.wav)
        encoder = AudioEncoder()
        block = encoder.encode(samples, args.window_s, unsafe_window=args.unsafe_window)
    except (ValueError, FileNotFoundError) as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(block.to_bytes())
    manifest = make_manifest("frontend encode", wav=Path(args.wav).name, window_s=args.window_s,
                             outputs=[out.name], seed=args.seed)
    Path(str(out) + ".manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    n, d = block.tokens.shape
    print(f"N={n} d={d}")
    return EXIT_OK


def cmd_render(args) -> int:
    try:
        frames = frames_from_csv(Path(args.frames).read_text())
        if not frames:
            raise ValueError("frame CSV has no rows")
        cfg = RendererConfig(sample_rate_hz=args.sample_rate, receptive_frames=args.receptive_frames,
                             n_codebooks=frames[0].n_codebooks)
        samples = Code2Wav(cfg).decode_stream(frames)
    except (ValueError, FileNotFoundError) as exc:
        raise UsageError(str(exc)) from None
    manifest = make_manifest("render", frames=Path(args.frames).name, sample_rate=args.sample_rate,
                             receptive_frames=args.receptive_frames, outputs=[Path(args.out).name],
                             seed=args.seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_wav(args.out, samples, cfg.sample_rate_hz, comment=manifest_line(manifest))
    print(f"frames={len(frames)} samples={samples.size} seconds={samples.size / cfg.sample_rate_hz:g}")
    return EXIT_OK


def cmd_check_all(args) -> int:
    from .acceptance import run_all

    results = run_all(quick=args.quick)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="omnistream", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **kw):
        p = sub.add_parser(name, **kw)
        p.add_argument("--seed", type=int, default=0)
        p.set_defaults(func=fn)
        return p

    p = add("simulate", cmd_simulate, help="latency model for one (modality, concurrency) profile")
    p.add_argument("--profile", default=None, help="profile JSON (default: bundled profile file)")
    p.add_argument("--modality", choices=["audio", "video"], default="audio")
    p.add_argument("--concurrency", type=int, default=1)
    p.add_argument("--n-frames", type=int, default=1)
    p.add_argument("--n-chunks", type=int, default=1)
    p.add_argument("--asynchronous", action="store_true")
    p.add_argument("--check", action="store_true", help="exit 1 unless reported totals/RTF are matched")
    p.add_argument("--total-tol-ms", type=float, default=5.0)
    p.add_argument("--rtf-tol", type=float, default=0.03)
    p.add_argument("--out-dir", default=None)

    p = add("demo", cmd_demo, help="end-to-end toy run with streaming/offline checks")
    p.add_argument("--duration-s", type=float, default=2.0)
    p.add_argument("--window-s", type=float, default=4.0)
    p.add_argument("--out-dir", default="demo_out")

    p = add("rope-dump", cmd_rope_dump, help="position triples for a segment list")
    p.add_argument("--input", default="-")
    p.add_argument("--out", default="-")
    p.add_argument("--start-id", type=int, default=0)
    p.add_argument("--no-manifest", action="store_true")

    p = add("frontend", cmd_frontend, help="audio frontend tools")
    p.add_argument("action", choices=["encode"])
    p.add_argument("--wav", required=True)
    p.add_argument("--window-s", type=float, default=4.0)
    p.add_argument("--unsafe-window", action="store_true")
    p.add_argument("--out", required=True)

    p = add("render", cmd_render, help="render a frame CSV to WAV")
    p.add_argument("--frames", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sample-rate", type=int, default=24_000)
    p.add_argument("--receptive-frames", type=int, default=16)

    p = add("check-all", cmd_check_all, help="run every acceptance criterion")
    p.add_argument("--quick", action="store_true", help="fewer random seeds")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())
