"""metasep command line: synth, tasks, train, eval, bench and diff subcommands.

Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .corpus import write_corpus
from .errors import ConfigError, InvalidInput, MetasepError
from .evaluation import (
    correlation_report,
    degradation,
    delta_table,
    evaluate,
    load_ratings,
    read_report,
    write_report,
)
from .experiment import ExperimentConfig, build_corpus, build_tasks, substream
from .metatrain import (
    METHODS,
    JsonlLogger,
    TrainState,
    lr_sweep_finetune,
    meta_gradient,
    train,
)
from .sepmodel import init_params, load_checkpoint, save_checkpoint
from .tasks import sample_meta_batch, write_task_manifest

log = logging.getLogger("metasep")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metasep", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", type=Path, help="experiment config (JSON); defaults apply when omitted")
        p.add_argument("--out", type=Path, required=out_required, help="output directory")
        p.add_argument("--seed", type=int, help="global seed (overrides the config)")
        p.add_argument("--speakers", type=int, choices=(2, 3), help="sources per mixture")

    p = sub.add_parser("synth", help="write a synthetic corpus to disk")
    common(p)

    p = sub.add_parser("tasks", help="write train, validation and target task manifests")
    common(p)

    p = sub.add_parser("train", help="train joint, MAML or FOMAML parameters")
    common(p)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--alpha", type=float, help="inner (fine-tune) learning rate")
    p.add_argument("--beta", type=float, help="outer learning rate")
    p.add_argument("--meta-batch", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--workers", type=_positive_int, default=os.cpu_count() or 1)
    p.add_argument("--resume", action="store_true", help="continue from <out>/state.json")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the target tasks")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--adapt", dest="adapt", action="store_true", default=None)
    p.add_argument("--no-adapt", dest="adapt", action="store_false")
    p.add_argument("--alpha", type=float, help="fine-tune learning rate")
    noise = p.add_mutually_exclusive_group()
    noise.add_argument("--noise-snr", type=float, metavar="DB", help="add seeded colored noise at this SNR")
    noise.add_argument("--no-noise", action="store_true")
    p.add_argument("--ratings", type=Path, help="domain_label,rating file for the correlation")
    p.add_argument("--workers", type=_positive_int, default=os.cpu_count() or 1)

    p = sub.add_parser("bench", help="time MAML against FOMAML meta-iterations")
    common(p)
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--meta-batch", type=int)
    p.add_argument("--alpha", type=float)

    p = sub.add_parser("diff", help="signed per-domain Si-SNRi delta between two reports")
    p.add_argument("report_a", type=Path)
    p.add_argument("report_b", type=Path)
    p.add_argument("--out", type=Path, help="write the delta table as JSON here")
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig().validate()
    data = cfg.to_dict()
    if args.seed is not None:
        data["seed"] = args.seed
    if args.speakers is not None:
        data["tasks"]["num_sources"] = args.speakers
        data["model"]["num_sources"] = args.speakers
    overrides = {
        "method": getattr(args, "method", None),
        "alpha": getattr(args, "alpha", None),
        "beta": getattr(args, "beta", None),
        "meta_batch": getattr(args, "meta_batch", None),
        "epochs": getattr(args, "epochs", None),
    }
    for key, value in overrides.items():
        if value is not None:
            data["train"][key] = value
    if args.command == "eval":
        if args.adapt is not None:
            data["eval"]["adapt"] = args.adapt
        if args.alpha is not None:
            data["eval"]["alpha"] = args.alpha
        if args.noise_snr is not None:
            data["eval"]["noise_snr_db"] = args.noise_snr
        if args.no_noise:
            data["eval"]["noise_snr_db"] = None
        if args.ratings is not None:
            data["eval"]["ratings"] = str(args.ratings)
    return ExperimentConfig.from_dict(data)


def _prepare_out(args, cfg: ExperimentConfig) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    return out


def cmd_synth(args, cfg):
    if "synth" not in cfg.corpus:
        raise ConfigError("synth needs a synthetic corpus section")
    out = _prepare_out(args, cfg)
    exp = build_corpus(cfg)
    manifest = write_corpus(exp.corpus, out)
    print(f"wrote {len(exp.corpus.utterances)} utterances to {manifest}")


def cmd_tasks(args, cfg):
    out = _prepare_out(args, cfg)
    tr, va, tg = build_tasks(cfg, build_corpus(cfg))
    for name, tasks in (("train", tr), ("val", va), ("target", tg)):
        write_task_manifest(tasks, out / f"tasks_{name}.jsonl")
    print(f"tasks: {len(tr)} train, {len(va)} validation, {len(tg)} target")


def cmd_train(args, cfg):
    out = _prepare_out(args, cfg)
    model_cfg, train_cfg = cfg.model_config(), cfg.train_config()
    tr, va, _ = build_tasks(cfg, build_corpus(cfg))
    state_path, log_path = out / "state.json", out / "train_log.jsonl"
    state = None
    if args.resume:
        if not state_path.exists():
            raise UsageError(f"--resume given but {state_path} does not exist")
        state = TrainState.from_dict(json.loads(state_path.read_text()))
    elif log_path.exists():
        log_path.unlink()

    def checkpoint(st):
        state_path.write_text(json.dumps(st.to_dict(), sort_keys=True) + "\n")
        save_checkpoint(out / "checkpoint.json", st.best_params, model_cfg,
                        extra={"method": train_cfg.method, "epoch": st.epoch, "best_val": st.best_val})

    logger = JsonlLogger(log_path)
    try:
        st = train(tr, va, train_cfg, model_cfg, state=state, logger=logger, on_epoch_end=checkpoint,
                   workers=args.workers, return_state=True)
    finally:
        logger.close()
    checkpoint(st)
    print(f"{train_cfg.method}: {st.epoch} epochs, best validation loss {st.best_val:.4f}, "
          f"checkpoint {out / 'checkpoint.json'}")


def _same_architecture(a, b) -> bool:
    da, db = a.to_dict(), b.to_dict()
    da.pop("seed"), db.pop("seed")
    return da == db


def cmd_eval(args, cfg):
    params, ckpt_cfg, _ = load_checkpoint(args.checkpoint)
    if not _same_architecture(ckpt_cfg, cfg.model_config()):
        raise ConfigError(f"checkpoint {args.checkpoint} does not match the configured model")
    out = _prepare_out(args, cfg)
    _, _, targets = build_tasks(cfg, build_corpus(cfg))
    ev, noise = cfg.eval, cfg.noise_config()
    report = evaluate(params, targets, ev["adapt"], ev["alpha"], ev["steps"], noise, ckpt_cfg, workers=args.workers)
    report.extra["checkpoint"] = str(args.checkpoint)
    table = load_ratings(ev["ratings"]) if ev.get("ratings") else None
    if table is not None:
        report.correlation = correlation_report(report, table)
    if ev["adapt"]:
        base = evaluate(params, targets, False, 0.0, 1, noise, ckpt_cfg, workers=args.workers)
        summary = degradation(base, report)
        report.extra["unadapted_overall"] = base.overall
        report.extra["degraded_tasks"] = summary.count
        report.extra["degraded"] = summary.tasks
        write_report(base, out, table, stem="report_unadapted")
    if ev.get("alpha_grid"):
        sweep = [lr_sweep_finetune(params, t, ev["alpha_grid"], ckpt_cfg, ev["steps"]) for t in targets]
        report.extra["alpha_sweep"] = [
            {"task_id": t.task_id, "best_alpha": a, "si_snri": s} for t, (a, s) in zip(targets, sweep)
        ]
    write_report(report, out, table)
    print(f"overall Si-SNRi {report.overall:.3f} dB over {len(report.per_task)} tasks")
    for d, v in report.per_domain.items():
        print(f"  {d:>12s} {v:8.3f}")
    if ev["adapt"]:
        print(f"fine-tuning lowered Si-SNRi on {report.extra['degraded_tasks']} of {len(report.per_task)} tasks")
    if report.correlation is not None:
        print(f"pearson r (rating vs Si-SNRi) = {report.correlation:.4f}")


def cmd_bench(args, cfg):
    if args.iterations < 1:
        raise UsageError("--iterations must be at least 1")
    out = _prepare_out(args, cfg)
    model_cfg, train_cfg = cfg.model_config(), cfg.train_config()
    tr, _, _ = build_tasks(cfg, build_corpus(cfg))
    batch = sample_meta_batch(tr, train_cfg.meta_batch, substream(cfg.seed, "bench"))
    params = init_params(model_cfg)
    rows = {}
    for method in ("maml", "fomaml"):
        mcfg = type(train_cfg)(**{**train_cfg.to_dict(), "method": method, "inner_steps": 1})
        meta_gradient(params, batch, mcfg, model_cfg)  # warm-up
        times = []
        for _ in range(args.iterations):
            start = time.perf_counter()
            meta_gradient(params, batch, mcfg, model_cfg)
            times.append(1e3 * (time.perf_counter() - start))
        rows[method] = {"mean_ms": float(np.mean(times)), "std_ms": float(np.std(times)), "iterations": args.iterations}
    ratio = rows["maml"]["mean_ms"] / rows["fomaml"]["mean_ms"]
    result = {"meta_batch": len(batch), "timings": rows, "maml_over_fomaml": ratio}
    (out / "bench.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    print(f"{'method':8s} {'mean ms':>10s} {'std ms':>9s}")
    for method, row in rows.items():
        print(f"{method:8s} {row['mean_ms']:10.2f} {row['std_ms']:9.2f}")
    print(f"maml/fomaml time ratio: {ratio:.2f}")


def cmd_diff(args):
    rows = delta_table(read_report(args.report_a), read_report(args.report_b))
    print(f"{'domain':>12s} {'a':>9s} {'b':>9s} {'b-a':>9s}")
    for r in rows:
        cells = ["" if r[k] is None else f"{r[k]:9.3f}" for k in ("a", "b", "delta")]
        print(f"{r['domain_label']:>12s} {cells[0]:>9s} {cells[1]:>9s} {cells[2]:>9s}")
    if args.out:
        Path(args.out).write_text(json.dumps(rows, indent=2) + "\n")


COMMANDS = {"synth": cmd_synth, "tasks": cmd_tasks, "train": cmd_train, "eval": cmd_eval, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "diff":
            cmd_diff(args)
            return EXIT_OK
        cfg = resolve_config(args)
        COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError, InvalidInput) as exc:
        print(f"metasep {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MetasepError, OSError) as exc:
        print(f"metasep {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
