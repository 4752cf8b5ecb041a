"""Command-line surface.

    ttq gen-data     --out DIR [--seed N --vocab-size V ...]
    ttq train        CONFIG
    ttq distill      CONFIG [--compare]
    ttq eval         CONFIG --checkpoint PATH [--split dev|test] [--int8]
    ttq report-size  CONFIG
    ttq report-flops CONFIG [--seq-len N]
    ttq bench        CONFIG [--repeats N]

Every run writes ``manifest.json`` (command, config digest, seed, version)
into the output directory; reports are written both as human-readable text
and as line-delimited JSON.  Exit codes: 0 ok, 2 config, 3 data, 4 numeric
divergence, 5 I/O.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .checkpoint import CheckpointError, checkpoint_load, checkpoint_save
from .config import ConfigError, RunConfig
from .data import DataFormatError, gen_synthetic_dataset, read_corpus, write_corpus
from .distill import compare_schedules, run_distillation
from .model import TransformerModel, architecture_flops, model_size_bytes
from .train import DivergenceError, TrainConfig, evaluate, train_end_to_end

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_IO = 2, 3, 4, 5


def _write_manifest(cfg: RunConfig, command: str, extra: dict | None = None):
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config_digest": cfg.digest(),
        "seed": cfg.seed,
        "version": __version__,
        "argv": sys.argv[1:],
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _write_report(cfg: RunConfig, stem: str, text: str, records: list[dict]):
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.txt").write_text(text)
    with open(out / f"{stem}.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _load_data(cfg: RunConfig):
    if cfg.data_dir is None:
        raise ConfigError("config has no 'data_dir'")
    return read_corpus(cfg.data_dir)


def cmd_gen_data(args) -> int:
    splits = gen_synthetic_dataset(
        seed=args.seed, vocab_size=args.vocab_size, num_intents=args.num_intents,
        num_slots=args.num_slots, num_examples=args.num_examples)
    write_corpus(splits, args.out, seed=args.seed)
    counts = {k: len(v) for k, v in splits.items()}
    print(f"wrote corpus to {args.out}: {counts}")
    return 0


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    data = _load_data(cfg)
    _write_manifest(cfg, "train")
    model = TransformerModel(cfg.model, cfg.seed)
    out = Path(cfg.output_dir)

    def log(entry):
        print(json.dumps(entry, sort_keys=True))

    report = train_end_to_end(model, data["train"], data.get("dev"), cfg.train, log=log)
    ckpt = out / "model.ttq"
    checkpoint_save(model, ckpt)
    lines = [json.dumps(e, sort_keys=True) for e in report["epochs"]]
    (out / "train_report.jsonl").write_text("\n".join(lines) + "\n")
    test_metrics = evaluate(model, data["test"]) if "test" in data else {}
    summary = {"checkpoint": str(ckpt), **{f"test_{k}": v for k, v in test_metrics.items()}}
    (out / "train_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_distill(args) -> int:
    cfg = RunConfig.load(args.config)
    data = _load_data(cfg)
    if cfg.teacher_checkpoint is None:
        raise ConfigError("distill needs distill.teacher_checkpoint in the config")
    teacher = checkpoint_load(cfg.teacher_checkpoint)
    _write_manifest(cfg, "distill", {"compare": bool(args.compare)})
    out = Path(cfg.output_dir)

    def log(entry):
        print(json.dumps(entry, sort_keys=True))

    if args.compare:
        def factory():
            return TransformerModel(cfg.model, cfg.seed)

        result = compare_schedules(teacher, factory, data["train"], cfg.distill,
                                   dev_set=data.get("dev"))
        student = result["students"]["layer_by_layer"]
        record = {
            "layer_by_layer": result["layer_by_layer"]["stages"],
            "all_at_once": result["all_at_once"]["stages"],
            "loss_trajectories": result["loss_trajectories"],
        }
        (out / "compare_report.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    else:
        student = TransformerModel(cfg.model, cfg.seed)
        report = run_distillation(teacher, student, data["train"], cfg.distill,
                                  dev_set=data.get("dev"), log=log)
        (out / "distill_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    ckpt = out / "student.ttq"
    checkpoint_save(student, ckpt)
    metrics = evaluate(student, data["test"]) if "test" in data else {}
    summary = {"checkpoint": str(ckpt), **{f"test_{k}": v for k, v in metrics.items()}}
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    cfg = RunConfig.load(args.config)
    data = _load_data(cfg)
    model = checkpoint_load(args.checkpoint)
    _write_manifest(cfg, "eval", {"checkpoint": args.checkpoint, "split": args.split})
    split = data.get(args.split)
    if split is None:
        raise DataFormatError(f"split {args.split!r} not present in {cfg.data_dir}")
    if args.int8:
        batches = list(split.batches(cfg.train.batch_size))[:4]
        model.calibrate_int([(ids, mask) for ids, mask, _, _ in batches])
        correct = total = 0
        for ids, mask, intents, _ in split.batches(cfg.train.batch_size):
            with ad.no_grad():
                trace = model.forward(ids, mask, mode="infer_int")
            correct += int((trace.intent_logits.data.argmax(axis=-1) == intents).sum())
            total += len(intents)
        metrics = {"intent_accuracy": correct / max(total, 1), "mode": "infer_int"}
    else:
        metrics = evaluate(model, split)
    record = {"split": args.split, **metrics}
    _write_report(cfg, "eval_report", json.dumps(record, indent=2, sort_keys=True) + "\n", [record])
    print(json.dumps(record, sort_keys=True))
    return 0


def cmd_report_size(args) -> int:
    cfg = RunConfig.load(args.config)
    _write_manifest(cfg, "report-size")
    model = TransformerModel(cfg.model, cfg.seed)
    report = model_size_bytes(model)
    lines = [f"model size report ({cfg.model.weight_bits}-bit weights)"]
    lines.append(f"  total bytes:        {report.bytes}")
    lines.append(f"  compressed params:  {report.param_count_compressed}")
    lines.append(f"  dense params:       {report.param_count_dense}")
    lines.append(f"  compression ratio:  {report.compression_ratio:.2f}x")
    lines.append("  per-component bytes:")
    for item in report.items:
        lines.append(f"    {item['name']:40s} {item['bytes']}")
    text = "\n".join(lines) + "\n"
    _write_report(cfg, "size_report", text, [report.to_dict()])
    print(text, end="")
    return 0


def cmd_report_flops(args) -> int:
    cfg = RunConfig.load(args.config)
    _write_manifest(cfg, "report-flops", {"seq_len": args.seq_len})
    report = architecture_flops(cfg.model, args.seq_len)
    text = (
        f"flops report (seq_len={args.seq_len}, weights {cfg.model.weight_bits}-bit, "
        f"activations {cfg.model.act_bits}-bit)\n"
        f"  factorized weighted ops: {report.flops:.4g}\n"
        f"  dense-equivalent ops:    {report.flops_dense:.4g}\n"
        f"  reduction:               {report.flops_dense / max(report.flops, 1e-12):.2f}x\n"
        f"  convention:              {report.convention}\n"
    )
    _write_report(cfg, "flops_report", text, [dict(report.to_dict(), seq_len=args.seq_len)])
    print(text, end="")
    return 0


def cmd_bench(args) -> int:
    cfg = RunConfig.load(args.config)
    _write_manifest(cfg, "bench", {"repeats": args.repeats})
    rng = np.random.default_rng(cfg.seed)
    seq = cfg.bench["seq_len"]
    batch = cfg.bench["batch"]
    repeats = args.repeats or cfg.bench["repeats"]
    compressed = TransformerModel(cfg.model, cfg.seed)
    dense_cfg = dataclasses.replace(cfg.model, compress=False, weight_bits=32, act_bits=32)
    dense = TransformerModel(dense_cfg, cfg.seed)
    ids = rng.integers(0, cfg.model.vocab_size, size=(batch, seq))
    mask = np.ones((batch, seq))
    records = []
    text_lines = [f"bench: batch={batch} seq={seq} repeats={repeats} (informational only)"]
    for name, model in (("dense", dense), ("tensor_compressed", compressed)):
        times = []
        with ad.no_grad():
            model.forward(ids, mask, mode="train")  # warm-up
            for _ in range(repeats):
                t0 = time.perf_counter()
                model.forward(ids, mask, mode="train")
                times.append(time.perf_counter() - t0)
        rec = {"model": name, "mean_s": float(np.mean(times)), "std_s": float(np.std(times)),
               "repeats": repeats}
        records.append(rec)
        text_lines.append(f"  {name:18s} mean {rec['mean_s']*1e3:8.2f} ms  "
                          f"std {rec['std_s']*1e3:6.2f} ms")
    text = "\n".join(text_lines) + "\n"
    _write_report(cfg, "bench_report", text, records)
    print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ttq",
                                 description="tensor-train compressed, quantization-aware "
                                             "transformer toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic intent/slot corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--vocab-size", type=int, default=120)
    g.add_argument("--num-intents", type=int, default=6)
    g.add_argument("--num-slots", type=int, default=8)
    g.add_argument("--num-examples", type=int, default=2000)
    g.set_defaults(func=cmd_gen_data)

    for name, func, extras in (
        ("train", cmd_train, ()),
        ("distill", cmd_distill, ("compare",)),
        ("report-size", cmd_report_size, ()),
        ("bench", cmd_bench, ("repeats",)),
    ):
        p = sub.add_parser(name)
        p.add_argument("config")
        if "compare" in extras:
            p.add_argument("--compare", action="store_true",
                           help="also run the all-at-once schedule side by side")
        if "repeats" in extras:
            p.add_argument("--repeats", type=int, default=None)
        p.set_defaults(func=func)

    e = sub.add_parser("eval")
    e.add_argument("config")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default="dev", choices=("train", "dev", "test"))
    e.add_argument("--int8", action="store_true", help="integer inference path")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("report-flops")
    f.add_argument("config")
    f.add_argument("--seq-len", type=int, default=128)
    f.set_defaults(func=cmd_report_flops)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
