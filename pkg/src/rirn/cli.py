"""Command-line entry point: ``rirn <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 a validation or
tolerance failure (gradient check, checkpoint mismatch).
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path


from . import io as rio
from .config import ConfigError, estimator_params, load_config
from .data import gen_dataset, read_dataset, read_frames, write_dataset
from .estimator import RIRNDeblurrer
from .gradcheck import NoSmoothPointError, cell_gradcheck
from .harness import BATTERY_PARAMS, BenchmarkSpec, dataset_psnr, make_benchmark, run_battery
from .metrics import EvalReport, format_psnr, psnr, ssim

log = logging.getLogger("rirn")

EXIT_OK, EXIT_USAGE, EXIT_FAIL = 0, 1, 2


class UsageError(Exception):
    pass


class ValidationFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _size(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("sizes must be positive")
    return h, w


def _int_list(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _load_model(path):
    try:
        return RIRNDeblurrer.load(path)
    except FileNotFoundError:
        raise UsageError(f"checkpoint not found: {path}") from None
    except rio.CheckpointError as exc:
        raise ValidationFailure(str(exc)) from None
    except rio.FormatError as exc:
        raise UsageError(f"{path}: {exc}") from None


def _load_data(path):
    try:
        return read_dataset(path)
    except (FileNotFoundError, rio.FormatError) as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    if args.frames < 2:
        raise UsageError(f"--frames must be >= 2 (a sequence needs at least two frames), got {args.frames}")
    if args.clips < 1 or args.subframes < 1:
        raise UsageError("--clips and --subframes must be >= 1")
    samples = gen_dataset(args.seed, args.clips, args.frames, args.size, args.subframes)
    try:
        write_dataset(args.out, samples)
    except OSError as exc:
        raise UsageError(f"cannot write to {args.out}: {exc.strerror}") from None
    print(f"wrote {args.clips} clips x {args.frames} frames to {args.out}")
    return EXIT_OK


def cmd_train(args):
    try:
        cfg = load_config(args.config, args.override)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    train = _load_data(cfg.data)
    evalset = _load_data(cfg.eval_data) if cfg.eval_data else train
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = cfg.log_path
    log_path.parent.mkdir(parents=True, exist_ok=True)
    try:
        est = RIRNDeblurrer(**estimator_params(cfg))
        est._validate_hyperparams()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if cfg.unroll > min(len(s) for s in train):
        raise UsageError(f"unroll={cfg.unroll} exceeds the shortest training clip")

    with open(log_path, "w", encoding="utf-8") as logf:

        def on_epoch(model, rec):
            loss = "nan" if math.isnan(rec["loss"]) else f"{rec['loss']:.6f}"
            line = f"epoch={rec['epoch']} loss={loss} psnr={format_psnr(rec['psnr'])}"
            logf.write(line + "\n")
            logf.flush()
            print(line, flush=True)
            if rec["epoch"] > 0:
                model.save(out / f"epoch_{rec['epoch']:04d}.ckpt")

        est.fit(train, eval_set=evalset, callback=on_epoch)
    est.save(out / "last.ckpt")
    print(f"checkpoint: {out / 'last.ckpt'}")
    return EXIT_OK


def _emit_report(report, args):
    print(report.to_table(timing=not args.no_timing), end="")
    if args.jsonl:
        Path(args.jsonl).write_text(report.to_jsonl(timing=not args.no_timing), encoding="utf-8")


def _score_predictions(pred_root, samples, label):
    report = EvalReport(label)
    for s in samples:
        d = Path(pred_root) / s.meta["clip"]
        frames = read_frames(d)
        if len(frames) != len(s):
            raise UsageError(f"{d}: {len(frames)} predicted frames for a {len(s)}-frame clip")
        report.add_clip(s.meta["clip"], [psnr(o, t) for o, t in zip(frames, s.sharp)],
                        [ssim(o, t) for o, t in zip(frames, s.sharp)])
    return report


def cmd_eval(args):
    samples = _load_data(args.data)
    if args.pred:
        report = _score_predictions(args.pred, samples, args.label or "pred")
        args.no_timing = True
    else:
        est = _load_model(args.ckpt)
        report = est.evaluate(samples, label=args.label, timing=not args.no_timing)
    _emit_report(report, args)
    return EXIT_OK


def _input_clips(root):
    """``[(name, frames)]`` from a frame directory or a dataset root."""
    root = Path(root)
    if not root.is_dir():
        raise UsageError(f"input directory not found: {root}")
    if any(root.glob("frame_*.ppm")):
        return [(None, read_frames(root))]
    clips = []
    for d in sorted(p for p in root.glob("clip_*") if p.is_dir()):
        src = d / "blur" if (d / "blur").is_dir() else d
        clips.append((d.name, read_frames(src)))
    if not clips or not all(frames for _, frames in clips):
        raise UsageError(f"no frame_*.ppm files under {root}")
    return clips


def cmd_deblur(args):
    est = _load_model(args.ckpt)
    try:
        clips = _input_clips(args.input)
    except rio.FormatError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    count = 0
    for name, frames in clips:
        (pred,) = est.predict([frames])
        dest = out if name is None else out / name
        dest.mkdir(parents=True, exist_ok=True)
        for t, frame in enumerate(pred):
            rio.write_image(dest / f"frame_{t:04d}.ppm", frame[None])
        count += len(pred)
    print(f"wrote {count} frames to {out}")
    return EXIT_OK


def cmd_gradcheck(args):
    failures = 0
    for base in args.bases.split(","):
        try:
            results = cell_gradcheck(base.strip(), variant=args.variant, seed=args.seed, eps=args.eps, tol=args.tol)
        except NoSmoothPointError as exc:
            raise ValidationFailure(str(exc)) from None
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        worst = max(r.rel_error for r in results)
        bad = [r for r in results if not r.ok]
        failures += len(bad)
        print(f"[{base} / {args.variant}] {len(results)} parameters, worst rel error {worst:.3e}")
        for r in results if args.list else bad:
            print("  " + str(r))
    if failures:
        print(f"gradcheck FAILED: {failures} parameter(s) above tol {args.tol:g}")
        return EXIT_FAIL
    print("gradcheck passed")
    return EXIT_OK


def cmd_attn_stats(args):
    est = _load_model(args.ckpt)
    if not est.config_.uses_blending:
        raise UsageError(f"checkpoint variant {est.variant!r} has no temporal blending")
    stats = est.attention_stats(_load_data(args.data), bins=args.bins)
    print(f"variant = {est.variant}")
    print(stats.to_text(), end="")
    return EXIT_OK


def cmd_ablate(args):
    spec = BenchmarkSpec(data_seed=args.data_seed, train_clips=args.train_clips, eval_clips=args.eval_clips,
                         frames=args.frames, size=args.size, subframes=args.subframes)
    kwargs = dict(BATTERY_PARAMS)
    if args.config:
        try:
            cfg = load_config(args.config, args.override)
        except ConfigError as exc:
            raise UsageError(str(exc)) from None
        kwargs = estimator_params(cfg)
        kwargs.pop("variant")
        kwargs.pop("seed")
    train, evalset = make_benchmark(spec)
    print(f"benchmark input psnr = {dataset_psnr(evalset):.4f}", flush=True)

    def progress(variant, seed, report, elapsed):
        print(f"{variant:<10} seed={seed} psnr={report.psnr:.4f} ssim={report.ssim:.4f} elapsed={elapsed:.0f}s", flush=True)

    result = run_battery(train, evalset, variants=args.variants.split(","), seeds=_int_list(args.seeds),
                         progress=progress, **kwargs)
    print(result.to_table(), end="")
    if args.jsonl:
        Path(args.jsonl).write_text(result.to_jsonl(), encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="rirn", description="Recurrent video deblurring with inner recurrence and adaptive blending.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="render a synthetic blurry/sharp dataset")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--clips", type=int, default=20)
    g.add_argument("--frames", type=int, default=16)
    g.add_argument("--size", type=_size, default=(64, 64), help="HxW, default 64x64")
    g.add_argument("--subframes", type=int, default=9, help="renders averaged per blurry frame")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train from a key = value config file")
    t.add_argument("--config", required=True)
    t.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="PSNR/SSIM of a checkpoint (or of saved predictions) on a dataset")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt")
    src.add_argument("--pred", help="directory of predicted frames laid out as clip_XXXX/frame_XXXX.ppm")
    e.add_argument("--data", required=True)
    e.add_argument("--label")
    e.add_argument("--jsonl", help="also write per-clip records to this file")
    e.add_argument("--no-timing", action="store_true", help="omit sec/frame")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("deblur", help="write deblurred frames as PPM")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--in", dest="input", required=True, help="frame directory or dataset root")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_deblur)

    c = sub.add_parser("gradcheck", help="finite-difference check of every cell parameter")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--bases", default="plain,gru,lstm")
    c.add_argument("--variant", default="rirn")
    c.add_argument("--eps", type=float, default=1e-4)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--list", action="store_true", help="list every parameter, not just failures")
    c.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("attn-stats", help="histogram of w + w~ over a dataset")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--bins", type=int, default=40)
    a.set_defaults(func=cmd_attn_stats)

    b = sub.add_parser("ablate", help="train and score every variant on the seeded synthetic benchmark")
    b.add_argument("--variants", default="baseline,irm,atb,dtb,rirn")
    b.add_argument("--seeds", default="0,1,2")
    b.add_argument("--config", help="key = value file replacing the default battery training settings")
    b.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    b.add_argument("--data-seed", type=int, default=BenchmarkSpec.data_seed)
    b.add_argument("--train-clips", type=int, default=BenchmarkSpec.train_clips)
    b.add_argument("--eval-clips", type=int, default=BenchmarkSpec.eval_clips)
    b.add_argument("--frames", type=int, default=BenchmarkSpec.frames)
    b.add_argument("--size", type=int, default=BenchmarkSpec.size)
    b.add_argument("--subframes", type=int, default=BenchmarkSpec.subframes)
    b.add_argument("--jsonl")
    b.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"rirn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValidationFailure as exc:
        print(f"rirn {args.command}: validation failed: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
