"""Command-line entry point: synth, train, infer, eval, gradcheck, kernel-bench.

Exit codes: 0 success, 1 bad input (usage, config, file format), 2 runtime failure.
Every command that writes files also writes a ``manifest.json`` next to them.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

log = logging.getLogger("adscribe")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write_manifest(out_dir: Path, command: str, cfg, extra: dict) -> None:
    manifest = {"command": command, "config": cfg.to_dict(), "seed": cfg.seed, **extra}
    (out_dir / "manifest.json").write_text(_dump(manifest), encoding="utf-8")


def _set_threads(n: int) -> None:
    import torch

    torch.set_num_threads(n)
    torch.use_deterministic_algorithms(True)


# --- subcommands ---------------------------------------------------------------

def cmd_synth(args, cfg) -> int:
    from .data import synth_dataset, write_dataset

    out = Path(args.out)
    ds = synth_dataset(cfg.synth_config())
    write_dataset(ds, out)
    _write_manifest(out, "synth", cfg, {"movies": {s: len(ds.split(s)) for s in ("train", "val", "test")}})
    print(f"wrote {len(ds.train)}/{len(ds.val)}/{len(ds.test)} movies to {out}")
    return EXIT_OK


def _load_model(ckpt_path, vocab_size_hint=None):
    from . import checkpoint
    from .model import AdModel, ModelConfig

    tensors, meta, digest = checkpoint.read(ckpt_path)
    model = AdModel(ModelConfig(**meta["model"]))
    checkpoint.load_into(model, tensors)
    model.eval()
    return model, meta, digest


def cmd_train(args, cfg) -> int:
    import torch

    from . import checkpoint
    from .data import read_dataset
    from .generation import BeamConfig
    from .model import AdModel
    from .pipeline import NMS_GRID, TAU_GRID, calibrate_decoding
    from .training import pretrain_decoder, train

    splits, vocab, _ = read_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    model = AdModel(cfg.model_config(len(vocab)))
    losses = pretrain_decoder(model.decoder, splits["train"], vocab, model.cfg, cfg.pretrain_config())
    model.decoder.freeze()
    decoder_before = checkpoint.section_hash(model, "decoder")
    result = train(model, splits["train"], vocab, cfg.train_config())
    decoder_after = checkpoint.section_hash(model, "decoder")
    if decoder_before != decoder_after:
        raise RuntimeError("decoder parameters changed during training")
    tau, nms_iou, f1s = cfg.tau, cfg.nms_iou, {}
    if cfg.calibrate_tau or cfg.calibrate_nms:
        if not splits.get("val"):
            raise ValueError("calibration needs a non-empty val split")
        beam = BeamConfig(width=cfg.beam, max_tokens=model.cfg.max_tokens)
        tau, nms_iou, f1s = calibrate_decoding(
            splits["val"], model, vocab, cfg.iterations, cfg.iou_thresh, cfg.window_step, beam,
            TAU_GRID if cfg.calibrate_tau else (cfg.tau,), NMS_GRID if cfg.calibrate_nms else (cfg.nms_iou,))
    meta = {"model": model.cfg.to_dict(), "tau": tau, "nms_iou": nms_iou}
    digest = checkpoint.save(out / "model.ckpt", model, meta)
    (out / "train_log.jsonl").write_text(result.jsonl(), encoding="utf-8")
    (out / "pretrain_log.jsonl").write_text(
        "".join(json.dumps({"step": i, "loss": x}) + "\n" for i, x in enumerate(losses)), encoding="utf-8")
    _write_manifest(out, "train", cfg, {
        "data": str(args.data), "checkpoint": "model.ckpt", "checkpoint_sha1": digest,
        "decoder_sha1": decoder_after, "steps": result.steps, "tau": tau, "nms_iou": nms_iou,
        "calibration_f1": {f"tau={t} nms={n}": v for (t, n), v in f1s.items()},
        "final_loss_total": result.log[-1]["loss_total"] if result.log else None,
    })
    print(f"trained {result.steps} steps; checkpoint {digest}; tau {tau}; nms_iou {nms_iou}")
    return EXIT_OK


def cmd_infer(args, cfg) -> int:
    from .data import read_dataset
    from .generation import BeamConfig
    from .metrics import MatchCounts, match_counts
    from .pipeline import run_movie

    splits, vocab, _ = read_dataset(args.data)
    if args.split not in splits:
        raise ValueError(f"dataset has no split {args.split!r}")
    model, meta, digest = _load_model(args.ckpt)
    tau = args.tau if args.tau is not None else float(meta.get("tau", cfg.tau))
    nms_iou = float(meta.get("nms_iou", cfg.nms_iou))
    beam = BeamConfig(width=cfg.beam, max_tokens=model.cfg.max_tokens)
    movies = splits[args.split]
    results = [run_movie(m, model, vocab, cfg.iterations, tau, cfg.window_step, nms_iou, beam) for m in movies]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"tau": tau, "nms_iou": nms_iou, "iterations": cfg.iterations,
               "movies": [r.to_json(vocab, model.cs) for r in results]}
    (out / "predictions.json").write_text(_dump(payload), encoding="utf-8")
    # detection quality after each refinement iteration, so saturation is visible
    report = []
    for j in range(1, cfg.iterations + 1):
        total = MatchCounts()
        for movie, res in zip(movies, results):
            total = total + match_counts(res.events_at(j, vocab), movie.annotations, cfg.iou_thresh)
        prec, rec, f1 = total.prf()
        report.append({"iteration": j, "precision": prec, "recall": rec, "f1": f1,
                       "tp": total.tp, "fp": total.fp, "fn": total.fn})
    (out / "iterations.json").write_text(_dump(report), encoding="utf-8")
    _write_manifest(out, "infer", cfg, {"data": str(args.data), "split": args.split, "tau": tau, "nms_iou": nms_iou,
                                        "checkpoint_sha1": digest})
    print(f"{'iteration':>9} {'precision':>9} {'recall':>9} {'f1':>9}")
    for row in report:
        print(f"{row['iteration']:>9d} {row['precision']:>9.4f} {row['recall']:>9.4f} {row['f1']:>9.4f}")
    return EXIT_OK


def read_predictions(path) -> dict:
    from .data import AdEvent, FormatError

    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        return {m["movie_id"]: [AdEvent(int(e["start"]), int(e["end"]), e.get("script_text"), float(e.get("score", 1.0)))
                                for e in m["events"]] for m in payload["movies"]}
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: not a prediction file ({exc})") from None


def cmd_eval(args, cfg) -> int:
    from .data import load_annotations
    from .metrics import evaluate

    preds = read_predictions(args.pred)
    annotations = load_annotations(args.annotations)
    if args.movies:
        keep = set(preds)
        annotations = {k: v for k, v in annotations.items() if k in keep}
    report = evaluate(preds, annotations, cfg.iou_thresh)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(_dump(report.to_dict()), encoding="utf-8")
    (out / "report.txt").write_text(report.table() + "\n", encoding="utf-8")
    _write_manifest(out, "eval", cfg, {"pred": str(args.pred), "annotations": str(args.annotations)})
    print(report.table())
    return EXIT_OK


def cmd_gradcheck(args, cfg) -> int:
    from .training import TINY, gradient_check

    if not args.tiny:
        raise ValueError("only the tiny configuration is supported; pass --tiny")
    report = gradient_check(TINY, seed=cfg.seed)
    for group, err in sorted(report.max_rel_err.items()):
        print(f"{group:<22} {err:.3e}")
    print(f"max relative error {report.worst:.3e} (seed {report.seed}, top-k margin {report.margin:.2e})")
    print(f"gen -> head_vod gradient: suppressed path {report.head_grad_from_gen:.3e}, "
          f"bypassed {'exactly zero' if report.bypass_head_grad_zero else 'NONZERO'}")
    ok = report.passed(1e-4)
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_kernel_bench(args, cfg) -> int:
    from .ssm import format_bench_table, kernel_bench

    rows = [kernel_bench(n, args.state, args.trials, cfg.seed) for n in args.len]
    print(format_bench_table(rows))
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
    "gradcheck": cmd_gradcheck, "kernel-bench": cmd_kernel_bench,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key = value file; flags override it")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, default=None, help="cap on intra-op threads (default 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="adscribe", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset directory")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", parents=[common], help="pretrain the decoder, then train the detector/generator")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("infer", parents=[common], help="run the refinement loop over a split")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--iterations", type=int)
    p.add_argument("--tau", type=float, help="acceptance threshold (default: value stored in the checkpoint)")

    p = sub.add_parser("eval", parents=[common], help="score predictions against annotations")
    p.add_argument("--pred", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--movies", action="store_true", help="restrict annotations to movies present in the predictions")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every gradient")
    p.add_argument("--tiny", action="store_true")

    p = sub.add_parser("kernel-bench", parents=[common], help="FFT kernel path vs recurrence")
    p.add_argument("--len", type=int, nargs="+", default=[64, 257, 1024])
    p.add_argument("--state", type=int, default=16)
    p.add_argument("--trials", type=int, default=3)
    return parser


def _resolve(args):
    from .config import ConfigError, resolve

    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value
    overrides["seed"] = args.seed
    overrides["threads"] = args.threads
    if getattr(args, "iterations", None) is not None:
        overrides["iterations"] = args.iterations
    return resolve(args.config, overrides)


def dispatch(argv=None) -> int:
    from .config import ConfigError
    from .data import FormatError

    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        cfg = _resolve(args)
    except UsageError as exc:
        print(f"adscribe: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ConfigError, OSError) as exc:
        print(f"adscribe: config error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    _set_threads(cfg.threads)
    try:
        return COMMANDS[args.command](args, cfg)
    except (FormatError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"adscribe: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        log.debug("runtime failure", exc_info=True)
        print(f"adscribe: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(dispatch())
