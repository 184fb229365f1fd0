"""Sanity experiment: both decoders learn an exact copy task.

Trains the autoregressive teacher and the parallel decoder (with all-ones
fertilities) on random token sequences whose target equals the source, then
reports greedy/argmax token accuracy on a held-out split and writes the
learning curves as a plot-ready TSV.
"""

import argparse
import statistics
import sys
import time
from pathlib import Path

import numpy as np

import natmt.nat as N
import natmt.pipeline as P
import natmt.synth as SY
import natmt.teacher as AR
from natmt.bench import write_learning_curve_tsv
from natmt.config import ModelConfig, TrainConfig
from natmt.data import Vocab, encode_corpus


def token_accuracy(hyps, refs):
    hit = sum(int(h == r) for hyp, ref in zip(hyps, refs)
              for h, r in zip(hyp, ref))
    return hit / sum(len(r) for r in refs)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", type=Path, default=Path("runs/copy"))
    ap.add_argument("--size", type=int, default=2000)
    ap.add_argument("--vocab", type=int, default=30)
    ap.add_argument("--teacher-steps", type=int, default=1200)
    ap.add_argument("--nat-steps", type=int, default=400)
    ap.add_argument("--seed", type=int, default=11)
    args = ap.parse_args(argv)
    args.out_dir.mkdir(parents=True, exist_ok=True)

    train = SY.gen_copy_corpus(args.size, seed=args.seed, vocab=args.vocab)
    dev = SY.gen_copy_corpus(max(args.size // 10, 50), seed=args.seed + 1,
                             vocab=args.vocab)
    sv = Vocab.build(s for s, _ in train)
    tv = Vocab.build(t for _, t in train)
    cfg = ModelConfig(d_model=64, d_hidden=256, n_layer=2, n_head=2,
                      src_vocab=len(sv), tgt_vocab=len(tv), max_len=64,
                      max_fertility=4)
    enc_train = encode_corpus(train, sv, tv)
    enc_dev = encode_corpus(dev, sv, tv)
    log = P.TrainingLog(args.out_dir / "train_log.jsonl")

    t0 = time.monotonic()
    teacher = P.train_teacher(
        enc_train, cfg,
        TrainConfig(steps=args.teacher_steps, batch_size=64, warmup=300,
                    seed=args.seed, log_every=50), log)
    refs = [t for _, t in enc_dev]
    acc_ar = token_accuracy([AR.greedy_decode(s, teacher)
                             for s, _ in enc_dev], refs)
    print(f"teacher: {args.teacher_steps} steps in {time.monotonic() - t0:.0f}s, "
          f"greedy token accuracy {acc_ar:.4f}")

    # the copy task has the trivial ground-truth fertility of one per token
    ones = [[1] * len(s) for s, _ in enc_train]
    t0 = time.monotonic()
    nat = P.train_nat(
        enc_train, ones, cfg,
        TrainConfig(steps=args.nat_steps, batch_size=64, warmup=300,
                    seed=args.seed + 1, log_every=50), log,
        init_from=AR.export_encoder(teacher))
    acc_nat = token_accuracy([N.decode_argmax(s, nat).output
                              for s, _ in enc_dev], refs)
    print(f"parallel decoder: {args.nat_steps} steps in "
          f"{time.monotonic() - t0:.0f}s, argmax token accuracy {acc_nat:.4f}")

    mean_fert = statistics.fmean(
        float(np.mean(N.decode_argmax(s, nat).fertility)) for s, _ in enc_dev)
    print(f"mean predicted fertility on dev: {mean_fert:.3f} (true 1.0)")

    curve = args.out_dir / "learning_curve.tsv"
    write_learning_curve_tsv(log.records, curve)
    print(f"wrote {curve} ({len(log.records)} records)")
    return 0 if min(acc_ar, acc_nat) >= 0.99 else 1


if __name__ == "__main__":
    sys.exit(main())
