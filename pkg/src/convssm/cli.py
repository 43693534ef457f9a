"""Command-line front end: ``convssm {verify,bench,train,rollout,info}``.

Every command accepts ``--precision``, ``--threads``, ``--seed`` and ``--out``.
The ``CSSM_THREADS`` environment variable overrides ``--threads``. Reports
are line-delimited JSON whose first record echoes the full command
configuration, so a report alone is enough to re-run it.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, container
from .bench import METHODS, BenchConfig, environment, run_bench
from .data import generate, metrics
from .layer import autoregress
from .train import (
    ConfigError,
    TrainConfig,
    TrainingDiverged,
    compare_with_convrnn,
    load_checkpoint,
    parse_kv,
    train,
    write_log,
)
from .verify import FAULTS, SUITES, run_suites

THREADS_ENV = "CSSM_THREADS"


def resolve_threads(flag: int | None) -> int:
    """``CSSM_THREADS`` beats ``--threads``, which beats the machine's CPU count."""
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            value = int(env)
        except ValueError:
            raise SystemExit(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    else:
        value = flag if flag is not None else (os.cpu_count() or 1)
    if value < 1:
        raise SystemExit("thread count must be >= 1")
    return value


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _method_list(text: str) -> tuple[str, ...]:
    methods = tuple(v.strip() for v in text.split(",") if v.strip())
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown methods {bad}; choose from {METHODS}")
    return methods


def _write_lines(path: Path, records) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    write_log(path, records)


def _config_record(args, **extra) -> dict:
    echo = {k: v for k, v in vars(args).items() if k != "func"}
    return {"record": "config", "command": args.command, "args": echo, **extra}


# ------------------------------------------------------------------ verify


def cmd_verify(args) -> int:
    names = list(SUITES) if args.suite == "all" else [args.suite]
    results = run_suites(names, args.seed, args.precision, args.inject_fault)
    records = [_config_record(args, environment=environment(args.threads, args.precision))]
    worst = None
    for suite, reports, seconds in results:
        for rep in reports:
            rec = {"record": "check", "suite": suite, **rep.to_dict()}
            records.append(rec)
            status = "PASS" if rep.passed else "FAIL"
            print(f"{status} {rep.name:<28} max_abs_err={rep.max_abs_err:.3e} "
                  f"tol={rep.tolerance:.0e} cases={rep.cases}")
            if not rep.passed:
                score = rep.max_abs_err / rep.tolerance if rep.tolerance else np.inf
                if worst is None or score > worst[0]:
                    worst = (score, rep)
        records.append({"record": "timing", "suite": suite, "seconds": seconds})
    if args.out:
        _write_lines(Path(args.out), records)
    if worst is not None:
        rep = worst[1]
        print(f"verify failed; worst offender: {rep.name} max_abs_err={rep.max_abs_err:.3e} "
              f"(tolerance {rep.tolerance:.0e})", file=sys.stderr)
        return 1
    print(f"verify passed: {sum(len(r) for _, r, _ in results)} checks")
    return 0


# ------------------------------------------------------------------- bench


def cmd_bench(args) -> int:
    thread_grid = args.thread_grid or tuple(sorted({1, args.threads}))
    try:
        cfg = BenchConfig(methods=args.methods, lengths=args.lengths, threads=thread_grid,
                          P=args.P, U=args.U, size=args.size, batch=args.batch,
                          repeats=args.repeats, backward=args.backward,
                          precision=args.precision, seed=args.seed)
    except ValueError as err:
        print(f"invalid bench config: {err}", file=sys.stderr)
        return 2

    def progress(row):
        print(f"{row['method']:<11} L={row['L']:<5} threads={row['threads']} "
              f"median={row['wall_ms']:.2f} ms span={row['span']}", flush=True)

    report = run_bench(cfg, command=" ".join(["bench"] + sys.argv[2:]), progress=progress)
    for fit in report.fits:
        print(f"fit {fit['method']} threads={fit['threads']}: log-log slope {fit['slope']:.3f}")
    for s in report.speedups:
        print(f"speedup {s['method']} L={s['L']}: {s['threads_from']}->{s['threads_to']} "
              f"threads {s['speedup']:.2f}x")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.ldjson").write_text(report.to_ldjson())
    (out / "bench.csv").write_text(report.to_csv())
    from .plotting import plot_scaling

    plot_scaling(report.rows, report.fits, out / "scaling.png")
    print(f"wrote {out / 'bench.ldjson'}, {out / 'bench.csv'}, {out / 'scaling.png'}")
    return 0


# ------------------------------------------------------------------- train


def build_train_config(args) -> TrainConfig:
    mapping = parse_kv(Path(args.config).read_text()) if args.config else {}
    for item in args.set or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        mapping[key.strip()] = value.strip()
    mapping["threads"] = str(args.threads)
    if args.precision is not None:
        mapping["precision"] = args.precision
    if args.seed is not None:
        mapping["seed"] = str(args.seed)
    return TrainConfig.from_mapping(mapping)


def _print_record(rec):
    if rec["kind"] == "train":
        print(f"step {rec['step']:>5} loss {rec['loss']:.5f} lr {rec['lr']:.2e} "
              f"t {rec['elapsed']:.1f}s", flush=True)
    else:
        print(f"eval {rec['step']:>5} rollout mse {rec['rollout_mse']:.5f} "
              f"(copy-last {rec['copy_last_mse']:.5f}, ratio {rec['mse_ratio']:.3f}) "
              f"psnr {rec['rollout_psnr']:.2f} dB", flush=True)


def cmd_train(args) -> int:
    from .plotting import plot_training

    try:
        cfg = build_train_config(args)
    except (ConfigError, OSError) as err:
        print(f"invalid config: {err}", file=sys.stderr)
        return 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    try:
        if args.compare_convrnn:
            if args.resume:
                print("--resume cannot be combined with --compare-convrnn", file=sys.stderr)
                return 2
            res = compare_with_convrnn(cfg, out, log_fn=_print_record)
            for s5_or_rnn in res["results"]:
                name = s5_or_rnn.config.cell
                plot_training(s5_or_rnn.log, out / name / "training.png", title=name)
            summary = {k: v for k, v in res.items() if k != "results"}
        else:
            resume = None
            if args.resume:
                resume = load_checkpoint(args.resume)
                cfg = replace(resume.config, threads=cfg.threads)
            result = train(cfg, out, resume=resume, log_fn=_print_record)
            plot_training(result.log, out / "training.png", title=cfg.cell)
            summary = result.summary()
    except TrainingDiverged as err:
        print(f"training aborted: {err}", file=sys.stderr)
        return 1
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return 0


# ----------------------------------------------------------------- rollout


def run_rollout(ckpt_path, context: int, horizon: int, sample: int = 0, threads: int = 1):
    """Generate from a checkpoint on one held-out sequence.

    Returns ``(arrays, report)`` where ``arrays`` holds the context, generated
    frames and ground truth, and ``report`` holds the PSNR curve and per-step times.
    """
    ckpt = load_checkpoint(ckpt_path)
    cfg = ckpt.config
    spec = cfg.model_spec()
    if context < 1 or horizon < 0:
        raise ValueError("context must be >= 1 and horizon >= 0")
    data_cfg = replace(cfg.data_config(), length=max(cfg.length, context + horizon),
                       samples=1, test_samples=sample + 1)
    _, test = generate(data_cfg)
    seq = test[:, sample:sample + 1].astype(spec.real_dtype)
    ctx = seq[:context]
    truth = seq[context:context + horizon]
    params = {k: np.asarray(v, spec.real_dtype) for k, v in ckpt.params.items()}
    step_times: list[float] = []
    generated, _ = autoregress(params, spec, ctx, horizon, threads, clip=(0.0, 1.0),
                               step_times=step_times)
    curve = [metrics(generated[t], truth[t]) for t in range(horizon)]
    report = {
        "checkpoint": str(ckpt_path), "step": ckpt.step, "context": context,
        "horizon": horizon, "sample": sample,
        "psnr_curve": [c["psnr"] for c in curve],
        "mse_curve": [c["mse"] for c in curve],
        # generated step n (1-based) for n >= 2; step 1 comes out of the context pass
        "step_times": step_times,
    }
    if horizon:
        report.update({f"rollout_{k}": v for k, v in metrics(generated, truth).items()})
    arrays = {"context": ctx, "generated": generated, "truth": truth}
    return arrays, report


def cmd_rollout(args) -> int:
    from .plotting import plot_rollout

    arrays, report = run_rollout(args.checkpoint, args.context, args.horizon,
                                 args.sample, args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    container.save(out / "rollout.cssm", arrays)
    records = [_config_record(args, environment=environment(args.threads, args.precision)),
               {"record": "rollout", **report}]
    _write_lines(out / "rollout.ldjson", records)
    plot_rollout(report["psnr_curve"], report["step_times"], out / "rollout.png")
    times = report["step_times"]
    if times:
        print(f"generated {args.horizon} frames; median step {1e3 * np.median(times):.2f} ms")
    if args.horizon:
        print(f"rollout mse {report['rollout_mse']:.5f} psnr {report['rollout_psnr']:.2f} dB")
    print(f"wrote {out / 'rollout.cssm'}, {out / 'rollout.ldjson'}, {out / 'rollout.png'}")
    return 0


# -------------------------------------------------------------------- info


def cmd_info(args) -> int:
    print(f"convssm {__version__}")
    print(json.dumps(environment(args.threads, args.precision), sort_keys=True))
    print(f"verify suites: {', '.join(SUITES)}")
    print(f"bench methods: {', '.join(METHODS)}")
    print("default training config:")
    print(TrainConfig().to_text(), end="")
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--precision", choices=("f32", "f64"), default=None,
                        help="floating point width (default f64 for verify, f32 otherwise)")
    common.add_argument("--threads", type=int, default=None,
                        help=f"worker count (default: CPU count; {THREADS_ENV} overrides)")
    common.add_argument("--seed", type=int, default=None, help="random seed")

    parser = argparse.ArgumentParser(prog="convssm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", parents=[common], help="run the correctness suites")
    p.add_argument("--suite", choices=SUITES + ("all",), default="all")
    p.add_argument("--inject-fault", choices=FAULTS, default=None,
                   help="deliberately corrupt one quantity to exercise the harness")
    p.add_argument("--out", default=None, help="write an LDJSON report to this file")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", parents=[common], help="time layers over a grid of lengths")
    p.add_argument("--methods", type=_method_list, default=METHODS)
    p.add_argument("--lengths", type=_int_list, default=(64, 128, 256, 512, 1024))
    p.add_argument("--thread-grid", type=_int_list, default=None,
                   help="thread counts to time (default: 1 and --threads)")
    p.add_argument("-P", type=int, default=32, help="state channels")
    p.add_argument("-U", type=int, default=16, help="feature channels")
    p.add_argument("--size", type=int, default=16, help="spatial side length")
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--backward", action="store_true", help="time forward+backward")
    p.add_argument("--out", default="bench-out", help="output directory")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("train", parents=[common], help="train on bouncing blobs")
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config entry (repeatable)")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--compare-convrnn", action="store_true",
                   help="also train a parameter-matched ConvRNN for the same wall-clock")
    p.add_argument("--out", default="train-out", help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rollout", parents=[common], help="generate from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--context", type=int, default=20)
    p.add_argument("--horizon", type=int, default=20)
    p.add_argument("--sample", type=int, default=0, help="held-out sequence index")
    p.add_argument("--out", default="rollout-out", help="output directory")
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("info", parents=[common], help="print version and environment")
    p.set_defaults(func=cmd_info)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.threads = resolve_threads(args.threads)
    if args.command == "verify":
        args.precision = args.precision or "f64"
        args.seed = 0 if args.seed is None else args.seed
    elif args.command == "bench":
        args.precision = args.precision or "f32"
        args.seed = 0 if args.seed is None else args.seed
    elif args.command in ("rollout", "info"):
        args.precision = args.precision or "f32"
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
