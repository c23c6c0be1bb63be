"""Command-line surface: every subcommand is a thin composition of library
operations. Exit codes: 0 success, 1 partial failure, 2 invalid invocation
or unusable input. All randomness flows from explicit --seed flags.

A JSON config file passed with --config supplies defaults for any long flag
(keys use underscores, e.g. {"per_bucket": 50}); explicit flags win.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, metrics, model as model_mod, training
from .audio import AudioFormatError, read_wav, write_wav
from .degrade import apply_trace, cut_segment, samples_per_packet
from .features import logpow_spectrogram
from .model import (
    ModelConfig,
    config_from_dict,
    count_params,
    load_weights_file,
    save_weights_file,
    tiny_config,
)
from .traces import (
    GilbertParams,
    SamplingSpec,
    TraceSegment,
    burst_stats,
    load_trace,
    save_trace,
    segment_trace,
    stratified_sample,
    synth_gilbert,
    write_sample_manifest,
)

WEIGHT_FORMAT_VERSION = "PLCW1"


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _write_run_manifest(path, command: str, args: argparse.Namespace,
                        inputs: list[str], outputs: list[str], t0: float) -> None:
    snapshot = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")}
    snapshot = {k: (str(v) if isinstance(v, Path) else v) for k, v in snapshot.items()}
    manifest = {
        "tool": "plcscore",
        "version": __version__,
        "weight_format": WEIGHT_FORMAT_VERSION,
        "command": command,
        "config": snapshot,
        "seeds": {k: v for k, v in snapshot.items() if "seed" in k},
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "wall_clock_s": round(time.monotonic() - t0, 3),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def _manifest_path(args, primary_output) -> Path | None:
    if getattr(args, "manifest", None):
        return Path(args.manifest)
    if primary_output is not None:
        return Path(str(primary_output) + ".manifest.json")
    return None


def _model_config_from_args(args) -> ModelConfig:
    if getattr(args, "tiny", False):
        return tiny_config()
    if getattr(args, "model_config", None):
        with open(args.model_config, "r", encoding="utf-8") as fh:
            return config_from_dict(json.load(fh))
    return ModelConfig()


def cmd_trace_synth(args) -> int:
    t0 = time.monotonic()
    params = GilbertParams(
        p_good_to_bad=args.p_good_bad,
        p_bad_to_good=args.p_bad_good,
        loss_in_bad=args.loss_in_bad,
        loss_in_good=args.loss_in_good,
        seed=args.seed,
    )
    trace = synth_gilbert(params, args.packets, args.packet_ms)
    save_trace(args.out, trace)
    stats = burst_stats(trace)
    print(f"wrote {args.out}: {trace.n_packets} packets, "
          f"{stats.loss_percent:.2f}% loss, max burst {stats.max_burst_ms:g} ms")
    mpath = _manifest_path(args, args.out)
    if mpath:
        _write_run_manifest(mpath, "trace-synth", args, [], [args.out], t0)
    return 0


def cmd_trace_stats(args) -> int:
    t0 = time.monotonic()
    results = []
    failures = 0
    for path in args.traces:
        try:
            trace = load_trace(path)
        except (OSError, ValueError) as exc:
            print(f"ERROR {path}: {exc}", file=sys.stderr)
            failures += 1
            continue
        stats = burst_stats(trace)
        results.append({
            "trace": str(path),
            "n_packets": trace.n_packets,
            "packet_duration_ms": trace.packet_duration_ms,
            "duration_ms": trace.duration_ms,
            **stats.to_dict(),
        })
    text = json.dumps(results, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
        mpath = _manifest_path(args, args.out)
        if mpath:
            _write_run_manifest(mpath, "trace-stats", args, list(args.traces), [args.out], t0)
    else:
        print(text)
    return 1 if failures else 0


def cmd_trace_sample(args) -> int:
    t0 = time.monotonic()
    heavy = tuple(int(v) for v in args.heavy_per_bucket.split(","))
    if len(heavy) != 3:
        print("error: --heavy-per-bucket needs three comma-separated counts", file=sys.stderr)
        return 2
    spec = SamplingSpec(
        mode=args.mode,
        segment_ms=args.segment_ms,
        bucket_count=args.bucket_count,
        per_bucket=args.per_bucket,
        heavy_per_bucket=heavy,
        long_burst_total=args.long_burst_total,
        rng_seed=args.seed,
    )
    candidates: list[TraceSegment] = []
    for i, path in enumerate(args.traces):
        trace = load_trace(path)
        seg_seed = _derived_seed(args.seed, 0x5E6, i)
        candidates.extend(segment_trace(
            trace, args.segment_ms, seg_seed,
            count=args.segments_per_trace, source_id=Path(path).stem))
    if not candidates:
        print("error: no candidate segments (traces loss-free or too short)", file=sys.stderr)
        return 2
    result = stratified_sample(candidates, spec)
    write_sample_manifest(args.out, result, spec)
    outputs = [args.out]
    if args.emit_dir:
        emit_dir = Path(args.emit_dir)
        emit_dir.mkdir(parents=True, exist_ok=True)
        for idx, item in enumerate(result.items):
            seg_path = emit_dir / f"seg_{idx:05d}.plctrace"
            save_trace(seg_path, item.segment.as_trace())
            outputs.append(str(seg_path))
    print(f"sampled {len(result.items)} segments from {len(candidates)} candidates "
          f"({len(result.shortfalls)} bucket shortfalls) -> {args.out}")
    for s in result.shortfalls:
        print(f"shortfall {s.bucket}: requested {s.requested}, available {s.available}",
              file=sys.stderr)
    mpath = _manifest_path(args, args.out)
    if mpath:
        _write_run_manifest(mpath, "trace-sample", args, list(args.traces), outputs, t0)
    if args.strict and result.shortfalls:
        return 1
    return 0


def _degrade_one(wav_path: str, trace, mode: str, out_dir: Path, cut_seed: int, idx: int):
    clip = read_wav(wav_path)
    target = trace.n_packets * samples_per_packet(trace)
    cut = cut_segment(clip, target, _derived_seed(cut_seed, idx))
    degraded = apply_trace(cut, trace, mode)
    out_path = out_dir / f"{Path(wav_path).stem}_{mode}.wav"
    write_wav(out_path, degraded.audio)
    return str(out_path)


def cmd_degrade(args) -> int:
    t0 = time.monotonic()
    trace_obj = load_trace(args.trace)
    trace = TraceSegment(Path(args.trace).stem, 0, trace_obj.lost, trace_obj.packet_duration_ms)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs: list[str | None] = [None] * len(args.wavs)
    errors: list[str | None] = [None] * len(args.wavs)

    def work(i):
        return _degrade_one(args.wavs[i], trace, args.mode, out_dir, args.cut_seed, i)

    if args.jobs > 1 and len(args.wavs) > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=args.jobs) as ex:
            futs = {ex.submit(work, i): i for i in range(len(args.wavs))}
            for fut in concurrent.futures.as_completed(futs):
                i = futs[fut]
                try:
                    outputs[i] = fut.result()
                except (OSError, ValueError) as exc:
                    errors[i] = str(exc)
    else:
        for i in range(len(args.wavs)):
            try:
                outputs[i] = work(i)
            except (OSError, ValueError) as exc:
                errors[i] = str(exc)

    n_fail = 0
    for i, wav in enumerate(args.wavs):
        if errors[i] is not None:
            print(f"ERROR {wav}: {errors[i]}", file=sys.stderr)
            n_fail += 1
        else:
            print(f"{wav} -> {outputs[i]}")
    mpath = _manifest_path(args, out_dir / "degrade")
    if mpath:
        _write_run_manifest(mpath, "degrade", args, list(args.wavs) + [args.trace],
                            [o for o in outputs if o], t0)
    return 1 if n_fail else 0


def cmd_train(args) -> int:
    t0 = time.monotonic()
    records = training.load_dataset_csv(args.data)
    mcfg = _model_config_from_args(args)
    tcfg = training.TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        weight_decay=args.weight_decay,
        rng_seed=args.seed,
        dtype=args.dtype,
        augment=not args.no_augment,
        grad_clip=args.grad_clip,
        lr_decay_per_epoch=args.lr_decay,
    )

    def progress(epoch, row):
        if args.quiet:
            return
        extra = "".join(f" {k}={v:.4f}" for k, v in row.items()
                        if k not in ("epoch", "train_mse"))
        print(f"epoch {epoch:4d}  train_mse {row['train_mse']:.6f}{extra}")

    result = training.train(records, mcfg, tcfg, callbacks=[progress],
                            eval_every=args.eval_every, eval_seed=args.seed)
    save_weights_file(args.out, result.weights, mcfg)
    outputs = [args.out]
    if args.history:
        training.write_history_csv(args.history, result.history)
        outputs.append(args.history)
    print(f"final train_mse {result.history[-1]['train_mse']:.6f}; weights -> {args.out}")
    mpath = _manifest_path(args, args.out)
    if mpath:
        _write_run_manifest(mpath, "train", args, [args.data], outputs, t0)
    return 0


def _score_one(wav_path: str, weights, config, base_seed: int, idx: int):
    clip = read_wav(wav_path)
    spec = logpow_spectrogram(clip)
    return model_mod.infer_mos(spec, weights, config, inference_seed=_derived_seed(base_seed, idx))


def cmd_score(args) -> int:
    t0 = time.monotonic()
    try:
        config, weights = load_weights_file(args.weights)
    except (OSError, ValueError) as exc:
        print(f"error: cannot load weights: {exc}", file=sys.stderr)
        return 2

    rows: list[str | None] = [None] * len(args.wavs)
    errors: list[str | None] = [None] * len(args.wavs)

    def work(i):
        res = _score_one(args.wavs[i], weights, config, args.seed, i)
        return f"{args.wavs[i]},{res.mos:.6f},{res.rater_stddev:.6f}"

    if args.jobs > 1 and len(args.wavs) > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=args.jobs) as ex:
            futs = {ex.submit(work, i): i for i in range(len(args.wavs))}
            for fut in concurrent.futures.as_completed(futs):
                i = futs[fut]
                try:
                    rows[i] = fut.result()
                except (OSError, ValueError) as exc:
                    errors[i] = str(exc)
    else:
        for i in range(len(args.wavs)):
            try:
                rows[i] = work(i)
            except (OSError, ValueError) as exc:
                errors[i] = str(exc)

    lines = ["clip_path,mos,per_rater_stddev"]
    n_fail = 0
    for i, wav in enumerate(args.wavs):
        if errors[i] is not None:
            print(f"ERROR {wav}: {errors[i]}", file=sys.stderr)
            n_fail += 1
        else:
            lines.append(rows[i])
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        mpath = _manifest_path(args, args.out)
        if mpath:
            _write_run_manifest(mpath, "score", args, list(args.wavs), [args.out], t0)
    else:
        sys.stdout.write(text)
        mpath = _manifest_path(args, None)
        if mpath:
            _write_run_manifest(mpath, "score", args, list(args.wavs), [], t0)
    return 1 if n_fail else 0


def cmd_evaluate(args) -> int:
    t0 = time.monotonic()
    try:
        config, weights = load_weights_file(args.weights)
    except (OSError, ValueError) as exc:
        print(f"error: cannot load weights: {exc}", file=sys.stderr)
        return 2
    records = [r for r in training.load_dataset_csv(args.data) if r.split == "eval"]
    by_clip: dict[str, list[training.VoteRecord]] = {}
    for r in records:
        by_clip.setdefault(r.clip_path, []).append(r)
    if len(by_clip) < 2:
        print("error: evaluation needs at least 2 eval files (correlation undefined)",
              file=sys.stderr)
        return 2

    pairs = []
    n_fail = 0
    for i, (clip_path, votes) in enumerate(sorted(by_clip.items())):
        try:
            res = _score_one(clip_path, weights, config, args.seed, i)
        except (OSError, ValueError) as exc:
            print(f"ERROR {clip_path}: {exc}", file=sys.stderr)
            n_fail += 1
            continue
        pairs.append(metrics.ScorePair(
            file_id=clip_path,
            model_tag=votes[0].model_tag,
            predicted=res.mos,
            reference_mos=float(np.mean([v.rating for v in votes])),
        ))
    if len(pairs) < 2:
        print("error: fewer than 2 files scored successfully", file=sys.stderr)
        return 2
    report = metrics.evaluate_pairs(pairs, ci=args.ci, n_resamples=args.n_resamples,
                                    seed=args.seed)
    print(metrics.render_report_text(report))
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n", encoding="utf-8")
        mpath = _manifest_path(args, args.out)
        if mpath:
            _write_run_manifest(mpath, "evaluate", args, [args.data, args.weights],
                                [args.out], t0)
    return 1 if n_fail else 0


def cmd_gradcheck(args) -> int:
    config = tiny_config() if not args.model_config else _model_config_from_args(args)
    report = training.gradcheck(config, tolerance=args.tolerance, h=args.step, seed=args.seed)
    print("\n".join(report.lines()))
    return 0 if report.passed else 1


def cmd_params(args) -> int:
    config = _model_config_from_args(args)
    total, breakdown = count_params(config)
    width = max(len(n) for n in breakdown) if breakdown else 10
    print(f"{'tensor':<{width}} {'params':>10}")
    for name, n in breakdown.items():
        print(f"{name:<{width}} {n:>10}")
    print(f"{'TOTAL':<{width}} {total:>10}")
    id_total = sum(n for name, n in breakdown.items() if name.startswith("id_mlp"))
    print(f"\nID-MLP subtotal: {id_total}")
    print(f"Originally released model: {model_mod.REFERENCE_RELEASE_PARAMS} parameters "
          "(reference only).")
    print("This build's total differs because several details of that model are "
          "unpublished: " + ", ".join(model_mod.ARCHITECTURE_UNKNOWNS) + ".")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="plcscore",
        description="Packet-loss-concealment quality toolkit: trace sampling, "
                    "degradation, non-intrusive MOS scoring, and evaluation.",
    )
    parser.add_argument("--version", action="version",
                        version=f"plcscore {__version__} (weight format {WEIGHT_FORMAT_VERSION})")
    parser.add_argument("--config", default=None,
                        help="JSON file providing defaults for any long flag")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("trace-synth", help="synthesize a two-state-model loss trace")
    p.add_argument("--out", required=True)
    p.add_argument("--packets", type=int, default=50_000)
    p.add_argument("--packet-ms", type=float, default=20.0)
    p.add_argument("--p-good-bad", type=float, required=True)
    p.add_argument("--p-bad-good", type=float, required=True)
    p.add_argument("--loss-in-bad", type=float, default=1.0)
    p.add_argument("--loss-in-good", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_trace_synth)

    p = sub.add_parser("trace-stats", help="loss and burst statistics of trace files")
    p.add_argument("traces", nargs="+")
    p.add_argument("--out", default=None)
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_trace_stats)

    p = sub.add_parser("trace-sample", help="segment traces and stratified-sample them")
    p.add_argument("traces", nargs="+")
    p.add_argument("--mode", choices=("basic", "heavy_loss", "long_bursts"), default="basic")
    p.add_argument("--out", required=True, help="manifest JSON path")
    p.add_argument("--segment-ms", type=float, default=10_000.0)
    p.add_argument("--segments-per-trace", type=int, default=200)
    p.add_argument("--bucket-count", type=int, default=14)
    p.add_argument("--per-bucket", type=int, default=100)
    p.add_argument("--heavy-per-bucket", default="100,50,25")
    p.add_argument("--long-burst-total", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--emit-dir", default=None, help="also write each sampled segment as a trace file")
    p.add_argument("--strict", action="store_true", help="exit 1 on any bucket shortfall")
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_trace_sample)

    p = sub.add_parser("degrade", help="apply a loss trace to clean WAV files")
    p.add_argument("wavs", nargs="+")
    p.add_argument("--trace", required=True)
    p.add_argument("--mode", choices=("zero", "oracle"), default="zero")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--cut-seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("train", help="train the scoring network on a vote manifest")
    p.add_argument("--data", required=True, help="CSV: clip_path,rating,id,model_tag,split")
    p.add_argument("--out", required=True, help="output weight file")
    p.add_argument("--history", default=None, help="per-epoch loss CSV")
    p.add_argument("--epochs", type=int, default=250)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--grad-clip", type=float, default=None)
    p.add_argument("--lr-decay", type=float, default=1.0)
    p.add_argument("--eval-every", type=int, default=0)
    p.add_argument("--tiny", action="store_true", help="use the tiny verification config")
    p.add_argument("--model-config", default=None, help="JSON model configuration")
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="non-intrusive MOS for WAV files")
    p.add_argument("wavs", nargs="*")
    p.add_argument("--weights", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default=None, help="CSV path (default: stdout)")
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("evaluate", help="correlate predictions with reference MOS")
    p.add_argument("--data", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ci", action="store_true", help="bootstrap 95%% confidence intervals")
    p.add_argument("--n-resamples", type=int, default=1000)
    p.add_argument("--out", default=None, help="JSON report path")
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of analytic gradients")
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model-config", default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("params", help="per-tensor parameter breakdown")
    p.add_argument("--tiny", action="store_true")
    p.add_argument("--model-config", default=None)
    p.set_defaults(func=cmd_params)

    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> list[str]:
    """Inject --config JSON values as subparser defaults; flags still win."""
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    if i + 1 >= len(argv):
        return argv
    with open(argv[i + 1], "r", encoding="utf-8") as fh:
        overrides = json.load(fh)
    if not isinstance(overrides, dict):
        raise ValueError("--config file must contain a JSON object")
    for action in parser._subparsers._group_actions:  # noqa: SLF001 - argparse has no public hook
        for sp in action.choices.values():
            known = {a.dest for a in sp._actions}
            sp.set_defaults(**{k: v for k, v in overrides.items() if k in known})
    return argv


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _apply_config_file(parser, argv)
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: bad --config file: {exc}", file=sys.stderr)
        return 2
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except AudioFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
