"""Single-sentence decoding benchmark: wall-clock, instrumented decoder-pass
counts, and plot-ready report emitters."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import nat as N
from . import teacher as AR
from .bleu import bleu


@dataclass
class SentenceStat:
    src_len: int
    out_len: int
    wall: float                 # seconds, median over repeats
    passes: int


@dataclass
class BenchReport:
    sentences: dict[str, list[SentenceStat]]
    mean: dict[str, float]
    median: dict[str, float]
    baseline: str

    def speedup(self, name: str) -> float:
        return self.mean[self.baseline] / self.mean[name]


def parse_strategy(spec: str) -> tuple[str, int | None]:
    """'greedy', 'beam:4', 'npd:10' -> (kind, numeric argument)."""
    kind, _, arg = spec.partition(":")
    if kind not in ("greedy", "beam", "argmax", "average", "npd"):
        raise ValueError(f"unknown decoding strategy {spec!r}")
    if arg:
        try:
            n = int(arg)
        except ValueError:
            raise ValueError(f"bad strategy argument in {spec!r}") from None
        if n < 1:
            raise ValueError(f"strategy argument must be positive in {spec!r}")
    else:
        n = {"beam": 4, "npd": 10}.get(kind)
    return kind, n


def _runner(spec: str, teacher_model, nat_model, seed: int) -> Callable:
    """Returns src_ids -> (output tokens, decoder passes) at batch size one."""
    kind, arg = parse_strategy(spec)
    if kind in ("greedy", "beam") and teacher_model is None:
        raise ValueError(f"strategy {spec!r} needs a teacher model")
    if kind in ("argmax", "average", "npd") and nat_model is None:
        raise ValueError(f"strategy {spec!r} needs a parallel model")
    if kind == "npd" and teacher_model is None:
        raise ValueError("npd needs a teacher model for rescoring")

    def run(src):
        if teacher_model is not None:
            teacher_model.reset_passes()
        if nat_model is not None:
            nat_model.reset_passes()
        if kind == "greedy":
            out = AR.greedy_decode(src, teacher_model)
        elif kind == "beam":
            out = AR.beam_decode(src, teacher_model, b=arg)
        elif kind == "argmax":
            out = N.decode_argmax(src, nat_model).output
        elif kind == "average":
            out = N.decode_average(src, nat_model).output
        else:
            out = N.decode_npd(src, nat_model, teacher_model, arg, seed).output
        passes = 0
        if teacher_model is not None:
            passes += teacher_model.decoder_passes
        if nat_model is not None:
            passes += nat_model.decoder_passes
        return out, passes

    return run


def bench_latency(testset: Sequence[Sequence[int]],
                  teacher_model=None, nat_model=None,
                  strategies: Sequence[str] = ("beam:4", "greedy", "argmax"),
                  repeats: int = 3, baseline: str | None = None,
                  seed: int = 0) -> BenchReport:
    """Times each strategy on every sentence alone (no minibatching); the
    first sentence is decoded once untimed to warm caches. Per-sentence
    wall-clock is the median over ``repeats`` runs on a monotonic clock."""
    if not testset:
        raise ValueError("empty benchmark set")
    if repeats < 1:
        raise ValueError("need at least one timed repeat")
    strategies = list(strategies)
    if baseline is None:
        baseline = strategies[0]
    if baseline not in strategies:
        raise ValueError(f"baseline {baseline!r} not among strategies")

    sentences: dict[str, list[SentenceStat]] = {}
    for spec in strategies:
        run = _runner(spec, teacher_model, nat_model, seed)
        run(testset[0])  # warm-up, untimed
        stats = []
        for src in testset:
            walls = []
            for _ in range(repeats):
                t0 = time.monotonic()
                out, passes = run(src)
                walls.append(time.monotonic() - t0)
            stats.append(SentenceStat(len(src), len(out),
                                      statistics.median(walls), passes))
        sentences[spec] = stats
    mean = {s: statistics.fmean(r.wall for r in recs)
            for s, recs in sentences.items()}
    med = {s: statistics.median(r.wall for r in recs)
           for s, recs in sentences.items()}
    return BenchReport(sentences, mean, med, baseline)


def latency_slope(stats: Sequence[SentenceStat], x: str = "src_len") -> float:
    """Least-squares slope of wall-clock against sentence length."""
    xs = np.array([getattr(r, x) for r in stats], dtype=np.float64)
    ys = np.array([r.wall for r in stats], dtype=np.float64)
    if len(xs) < 2 or np.ptp(xs) == 0:
        raise ValueError("need at least two distinct lengths for a slope")
    return float(np.polyfit(xs, ys, 1)[0])


# ---------------------------------------------------------------------------
# report emitters
# ---------------------------------------------------------------------------

def write_tsv(path: str | Path, header: Sequence[str], rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(str(c) for c in row) + "\n")


def write_latency_tsv(report: BenchReport, path: str | Path) -> None:
    """Plot-ready per-sentence (length, latency) pairs per strategy."""
    rows = []
    for spec, recs in report.sentences.items():
        for r in recs:
            rows.append((spec, r.src_len, r.out_len,
                         f"{r.wall:.6f}", r.passes))
    write_tsv(path, ("strategy", "src_len", "out_len", "wall_s", "passes"), rows)


def npd_quality_curve(testset, refs, nat_model, teacher_model,
                      sample_counts: Sequence[int], seed: int = 0):
    """Corpus BLEU and mean winning teacher score per noisy-decoding sample
    budget; rows are plot-ready."""
    rows = []
    for s in sample_counts:
        hyps, scores = [], []
        for src in testset:
            res = N.decode_npd(src, nat_model, teacher_model, s, seed)
            hyps.append(res.output)
            scores.append(res.teacher_score)
        rows.append((s, bleu(hyps, refs), statistics.fmean(scores)))
    return rows


def write_npd_curve_tsv(rows, path: str | Path) -> None:
    write_tsv(path, ("samples", "bleu", "mean_teacher_score"),
              ((s, f"{b:.2f}", f"{m:.4f}") for s, b, m in rows))


def write_learning_curve_tsv(records: Sequence[dict], path: str | Path) -> None:
    """Flattens training-log records into step/phase/loss columns."""
    rows = [(r["step"], r["phase"], f"{r['loss']:.6f}", f"{r['wall']:.3f}")
            for r in records]
    write_tsv(path, ("step", "phase", "loss", "wall_s"), rows)
