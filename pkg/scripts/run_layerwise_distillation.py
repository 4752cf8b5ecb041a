#!/usr/bin/env python3
"""Train a dense teacher, distill an INT8 TT student stage by stage, and
compare the layer-by-layer schedule against training the all-layers loss from
scratch.

Usage: python scripts/run_layerwise_distillation.py [--seed N] [--compare]
"""

import argparse
import time
from dataclasses import replace

from ttq.data import gen_synthetic_dataset
from ttq.distill import DistillConfig, compare_schedules, run_distillation
from ttq.model import ModelConfig, PlanSpec, TransformerModel
from ttq.train import TrainConfig, evaluate, train_end_to_end
from ttq.tt import TTFormat


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--compare", action="store_true",
                    help="also run the all-at-once schedule on the same init")
    args = ap.parse_args()

    data = gen_synthetic_dataset(seed=11, vocab_size=120, num_intents=6,
                                 num_slots=8, num_examples=2000)
    teacher_cfg = ModelConfig(
        vocab_size=120, hidden=32, ffn_dim=64, num_layers=2, num_heads=2,
        max_seq=16, num_intents=6, num_slots=9, compress=False, dtype="float32")
    t0 = time.time()
    teacher = TransformerModel(teacher_cfg, args.seed)
    train_end_to_end(teacher, data["train"], None,
                     TrainConfig(learning_rate=1e-3, epochs=15, batch_size=32,
                                 seed=args.seed))
    t_metrics = evaluate(teacher, data["test"])
    print(f"teacher trained in {time.time()-t0:.0f}s: "
          f"intent {t_metrics['intent_accuracy']:.4f} slot f1 {t_metrics['slot_f1']:.4f}")

    student_cfg = replace(
        teacher_cfg, compress=True, weight_bits=8, act_bits=8,
        emb_spec=PlanSpec(d=2, rank=4, fmt=TTFormat.TTM),
        attn_spec=PlanSpec(d=2, rank=4), ffn_spec=PlanSpec(d=2, rank=4),
        head_spec=PlanSpec(d=2, rank=4))
    dcfg = DistillConfig(stage_epochs=3, final_epochs=8, stage_lr=1e-3,
                         final_lr=1e-3, batch_size=32, seed=args.seed)

    if args.compare:
        def factory():
            return TransformerModel(student_cfg, args.seed + 1)

        result = compare_schedules(teacher, factory, data["train"], dcfg,
                                   dev_set=data["dev"])
        for key in ("layer_by_layer", "all_at_once"):
            student = result["students"][key]
            m = evaluate(student, data["test"])
            print(f"{key:16s}: intent {m['intent_accuracy']:.4f} "
                  f"slot f1 {m['slot_f1']:.4f}")
    else:
        t1 = time.time()
        student = TransformerModel(student_cfg, args.seed + 1)
        report = run_distillation(teacher, student, data["train"], dcfg,
                                  dev_set=data["dev"])
        for stage in report["stages"]:
            tag = "final" if stage["final"] else f"stage {stage['stage']}"
            print(f"  {tag:8s} lr {stage['lr']:.0e} last loss {stage['loss_curve'][-1]:.5f}")
        m = evaluate(student, data["test"])
        print(f"student distilled in {time.time()-t1:.0f}s: "
              f"intent {m['intent_accuracy']:.4f} slot f1 {m['slot_f1']:.4f} "
              f"(teacher {t_metrics['intent_accuracy']:.4f})")


if __name__ == "__main__":
    main()
