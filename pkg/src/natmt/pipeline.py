"""End-to-end training: distillation corpus construction, supervised
translation+fertility training, encoder seeding from the teacher, and the
fine-tuning objective.

Sign conventions, fixed here once: ``rkl_value`` is the teacher-weighted
student expectation to be MAXIMIZED (a one-hot student turns it into the
teacher's score of the argmax output). Every reported loss negates such
values, so all numbers in logs and returned breakdowns decrease as the
student improves. The fine-tuning total is
lambda * (L_RL + L_BP) + (1 - lambda) * L_KD.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nat as NAT
from . import teacher as AR
from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ModelConfig, TrainConfig
from .data import EOS, PAD, Batch, Vocab, make_batches, pad_block
from .optim import AdamWarmup
from .tensor import Tensor


# ---------------------------------------------------------------------------
# training log
# ---------------------------------------------------------------------------

class TrainingLog:
    """Append-only line-delimited JSON records; also kept in memory for
    plotting learning curves."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def record(self, **fields) -> None:
        self.records.append(fields)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(fields) + "\n")


# ---------------------------------------------------------------------------
# distillation corpus
# ---------------------------------------------------------------------------

@dataclass
class DistilledCorpus:
    pairs: list[tuple[list[int], list[int]]]
    mode: str                       # "greedy" or "beam"
    replaced_empty: int = 0


def build_distill_corpus(pairs: Sequence[tuple[Sequence[int], Sequence[int]]],
                         teacher_model: AR.TeacherModel,
                         mode: str = "greedy", beam_width: int = 4
                         ) -> DistilledCorpus:
    """Re-target the corpus with the frozen teacher's own decodes."""
    if mode not in ("greedy", "beam"):
        raise ValueError(f"unknown distillation mode {mode!r}")
    out = []
    empty = 0
    for src, _ in pairs:
        src = list(src)
        if mode == "greedy":
            hyp = AR.greedy_decode(src, teacher_model)
        else:
            hyp = AR.beam_decode(src, teacher_model, b=beam_width)
        if not hyp:
            empty += 1
            hyp = [EOS]  # keep the pair with a minimal length-1 target
        out.append((src, hyp))
    if empty:
        warnings.warn(f"replaced {empty} empty teacher decode(s) with the end marker")
    return DistilledCorpus(out, mode, empty)


# ---------------------------------------------------------------------------
# supervised training step
# ---------------------------------------------------------------------------

@dataclass
class MlStepResult:
    translation_loss: float
    fertility_loss: float

    @property
    def total(self) -> float:
        # the proposal is deterministic, so its entropy adds exactly nothing
        return self.translation_loss + self.fertility_loss


def _nat_losses(batch: Batch, model: NAT.NatModel) -> tuple[Tensor, Tensor]:
    """Mean-per-position translation and fertility cross-entropies for one
    batch carrying aligner fertilities."""
    if batch.fertility is None:
        raise ValueError("batch carries no fertility supervision")
    sums = batch.fertility.sum(axis=1)
    if not np.array_equal(sums, batch.tgt_len):
        bad = int(np.flatnonzero(sums != batch.tgt_len)[0])
        raise ValueError(
            f"fertility sum {int(sums[bad])} != target length "
            f"{int(batch.tgt_len[bad])} at batch row {bad}")
    memory = model.encode(batch.src, batch.src_len)

    fert_lp = T.log_softmax(model.fertility_logits(memory), axis=-1)
    src_valid = np.arange(batch.src.shape[1])[None, :] < batch.src_len[:, None]
    fert_loss = T.cross_entropy(fert_lp, batch.fertility, pad_id=-1, mask=src_valid)

    copies = [NAT.copy_fertility(list(batch.src[i, : batch.src_len[i]]),
                                 list(batch.fertility[i, : batch.src_len[i]]))
              for i in range(batch.size)]
    dec_ids, dec_len = pad_block(copies)
    logits = model.decode_logits(memory, batch.src_len, dec_ids, dec_len)
    tgt = batch.tgt
    if tgt.shape[1] < dec_ids.shape[1]:
        pad_cols = dec_ids.shape[1] - tgt.shape[1]
        tgt = np.concatenate(
            [tgt, np.full((batch.size, pad_cols), PAD, dtype=tgt.dtype)], axis=1)
    tgt_valid = np.arange(tgt.shape[1])[None, :] < batch.tgt_len[:, None]
    trans_loss = T.cross_entropy(T.log_softmax(logits, axis=-1), tgt,
                                 pad_id=PAD, mask=tgt_valid)
    return trans_loss, fert_loss


def nat_ml_step(batch: Batch, model: NAT.NatModel, optim: AdamWarmup) -> MlStepResult:
    """One step on the two-term supervised objective: token cross-entropy at
    the aligner's copied inputs plus fertility cross-entropy."""
    trans_loss, fert_loss = _nat_losses(batch, model)
    model.zero_grad()
    T.backward(T.add(trans_loss, fert_loss))
    optim.step()
    return MlStepResult(float(trans_loss.item()), float(fert_loss.item()))


# ---------------------------------------------------------------------------
# encoder seeding
# ---------------------------------------------------------------------------

def init_encoder_from_teacher(student: NAT.NatModel,
                              exported: Sequence[tuple[str, np.ndarray]]) -> None:
    """Copy exported encoder parameters into the student by name; fertility
    head and decoder stay untouched."""
    table = dict(student.named_parameters())
    student_enc = {n for n in table if n.startswith("encoder.")}
    given = {n for n, _ in exported}
    problems = []
    for name in sorted(given - student_enc):
        problems.append(f"unexpected parameter {name}")
    for name in sorted(student_enc - given):
        problems.append(f"missing parameter {name}")
    for name, arr in exported:
        if name in table and table[name].data.shape != arr.shape:
            problems.append(
                f"shape mismatch {name}: teacher {arr.shape} vs "
                f"student {table[name].data.shape}")
    if problems:
        raise ValueError("encoder import failed: " + "; ".join(problems))
    for name, arr in exported:
        table[name].data[...] = arr


# ---------------------------------------------------------------------------
# fine-tuning terms
# ---------------------------------------------------------------------------

def rkl_value(src_ids: Sequence[int], fertility: Sequence[int],
              student: NAT.NatModel, teacher_model: AR.TeacherModel,
              with_grad: bool = True):
    """Teacher-weighted student expectation for one fertility sequence.

    The student translates the fertility copies once; the frozen teacher is
    force-decoded on that output, and the value is
    sum_t sum_y log p_teacher(y | output_<t, x) * p_student(y at t), plus the
    teacher's end-marker log-prob, so a one-hot student recovers exactly the
    teacher's score of the output. The padding id is masked out of the student
    distribution, as in every decode path. Returned as a graph node unless
    ``with_grad`` is off.
    """
    fert = np.asarray(fertility, dtype=np.int64)
    src = np.asarray(src_ids, dtype=np.int64)[None, :]
    src_len = np.array([len(src_ids)])
    dec_ids, dec_len = pad_block([NAT.copy_fertility(list(src_ids), list(fert))])

    def student_logits():
        memory = student.encode(src, src_len)
        return student.decode_logits(memory, src_len, dec_ids, dec_len)

    if with_grad:
        logits = student_logits()
    else:
        with T.no_grad():
            logits = student_logits()
    pad_bias = np.zeros(logits.shape[-1], dtype=np.float32)
    pad_bias[PAD] = -1e9
    probs = T.softmax(T.add(logits, Tensor(pad_bias)), axis=-1)
    yhat = [int(t) for t in probs.data[0].argmax(axis=-1)]

    with T.no_grad():
        t_memory = teacher_model.encode(src, src_len)
        t_in, t_len = pad_block([[int(AR.BOS)] + yhat])
        t_logits = teacher_model.decode_logits(t_memory, src_len, t_in, t_len)
        t_logp = T.log_softmax(t_logits, axis=-1).numpy().astype(np.float64)[0]

    token_part = T.tsum(
        T.mul(probs, Tensor(t_logp[None, : len(yhat)].astype(np.float32))))
    eos_part = float(t_logp[len(yhat), EOS])
    return T.add(token_part, Tensor(np.float32(eos_part)))


def fertility_log_prob(src_ids: Sequence[int], fertility: Sequence[int],
                       model: NAT.NatModel) -> Tensor:
    """Differentiable sum of per-position fertility log-probs."""
    fert = np.asarray(fertility, dtype=np.int64)
    src = np.asarray(src_ids, dtype=np.int64)[None, :]
    memory = model.encode(src, np.array([len(src_ids)]))
    logp = T.log_softmax(model.fertility_logits(memory), axis=-1)
    pick = np.zeros(logp.shape, dtype=np.float32)
    pick[0, np.arange(len(fert)), fert] = 1.0
    return T.tsum(T.mul(logp, Tensor(pick)))


@dataclass
class FinetuneResult:
    l_rl: float
    l_bp: float
    l_kd: float
    total: float


def finetune_step(batch: Batch, model: NAT.NatModel,
                  teacher_model: AR.TeacherModel, lam: float,
                  optim: AdamWarmup, rng: np.random.Generator,
                  terms: Sequence[str] = ("rl", "bp", "kd"),
                  kd_includes_fertility: bool = True) -> FinetuneResult:
    """One fine-tuning step.

    kd: the supervised two-term loss on the (distilled) batch targets.
    bp: negated rkl_value at the aligner fertilities, gradients flowing
        through the student token distributions.
    rl: single-sample score-function estimate. A fertility sequence is drawn
        per sentence; the advantage against the rounded-average baseline
        multiplies the gradient of its log-probability. Reported value is the
        negated sampled reward.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"interpolation weight {lam} outside [0, 1]")
    unknown = set(terms) - {"rl", "bp", "kd"}
    if unknown:
        raise ValueError(f"unknown fine-tuning terms {sorted(unknown)}")
    if batch.fertility is None:
        raise ValueError("fine-tuning needs aligner fertilities on the batch")

    contributions: list[Tensor] = []
    l_rl = l_bp = l_kd = 0.0

    use_rl = "rl" in terms and lam > 0.0
    use_bp = "bp" in terms and lam > 0.0
    use_kd = "kd" in terms and lam < 1.0

    if use_kd:
        trans_loss, fert_loss = _nat_losses(batch, model)
        kd = T.add(trans_loss, fert_loss) if kd_includes_fertility else trans_loss
        l_kd = float(kd.item())
        contributions.append(T.mul(kd, Tensor(np.float32(1.0 - lam))))

    if use_rl or use_bp:
        rl_terms: list[Tensor] = []
        bp_terms: list[Tensor] = []
        for i in range(batch.size):
            src_ids = [int(t) for t in batch.src[i, : batch.src_len[i]]]
            f_q = batch.fertility[i, : batch.src_len[i]]
            probs = NAT.predict_fertility(src_ids, model)
            if use_bp:
                bp = T.neg(rkl_value(src_ids, f_q, model, teacher_model))
                l_bp += float(bp.item())
                bp_terms.append(bp)
            if use_rl:
                # score function keeps the raw draw; only the translation
                # input is floored, so the estimator stays unbiased
                f_s = NAT.sample_fertilities(probs, 1, rng)[0]
                f_tr = NAT.floor_fertility(f_s, probs)
                expected = (probs * np.arange(probs.shape[1])[None, :]).sum(axis=-1)
                f_bar = NAT.floor_fertility(NAT.round_half_away(expected), probs)
                with T.no_grad():
                    reward = float(rkl_value(src_ids, f_tr, model, teacher_model,
                                             with_grad=False).item())
                    baseline = float(rkl_value(src_ids, f_bar, model, teacher_model,
                                               with_grad=False).item())
                advantage = reward - baseline
                l_rl += -reward
                if advantage != 0.0:
                    surrogate = T.mul(fertility_log_prob(src_ids, f_s, model),
                                      Tensor(np.float32(-advantage)))
                    rl_terms.append(surrogate)
        scale = np.float32(lam / batch.size)
        for t_ in rl_terms + bp_terms:
            contributions.append(T.mul(t_, Tensor(scale)))
        l_rl /= batch.size
        l_bp /= batch.size

    model.zero_grad()
    if contributions:
        total = contributions[0]
        for c in contributions[1:]:
            total = T.add(total, c)
        T.backward(total)
    optim.step()
    return FinetuneResult(l_rl, l_bp, l_kd,
                          lam * (l_rl + l_bp) + (1.0 - lam) * l_kd)


# ---------------------------------------------------------------------------
# loops
# ---------------------------------------------------------------------------

def _batch_stream(pairs, tcfg: TrainConfig, fertilities=None):
    rng = np.random.default_rng(tcfg.seed)
    while True:
        for b in make_batches(pairs, tcfg.batch_size, rng=rng,
                              fertilities=fertilities):
            yield b


def train_teacher(pairs, cfg: ModelConfig, tcfg: TrainConfig,
                  log: TrainingLog | None = None,
                  model: AR.TeacherModel | None = None) -> AR.TeacherModel:
    if model is None:
        model = AR.TeacherModel(cfg, np.random.default_rng(tcfg.seed))
    opt = AdamWarmup(list(model.named_parameters()),
                     scale=tcfg.scale_for(cfg), warmup=tcfg.warmup)
    start = time.monotonic()
    for step, batch in enumerate(_batch_stream(pairs, tcfg), start=1):
        loss = AR.ar_train_step(batch, model, opt)
        if log and (step % tcfg.log_every == 0 or step == tcfg.steps):
            log.record(step=step, phase="teacher", loss=loss,
                       wall=time.monotonic() - start)
        if step >= tcfg.steps:
            break
    return model


def attach_fertilities(pairs, fertilities):
    """Pair corpus entries with aligner fertilities, dropping (and counting)
    any pair whose fertility total disagrees with its target length."""
    kept_pairs, kept_fert, dropped = [], [], 0
    for (src, tgt), f in zip(pairs, fertilities):
        if sum(f) != len(tgt) or len(f) != len(src):
            dropped += 1
            continue
        kept_pairs.append((src, tgt))
        kept_fert.append(f)
    if dropped:
        warnings.warn(f"dropped {dropped} pair(s) with inconsistent fertilities")
    return kept_pairs, kept_fert, dropped


def train_nat(pairs, fertilities, cfg: ModelConfig, tcfg: TrainConfig,
              log: TrainingLog | None = None,
              init_from: Sequence[tuple[str, np.ndarray]] | None = None,
              model: NAT.NatModel | None = None) -> NAT.NatModel:
    pairs, fertilities, _ = attach_fertilities(pairs, fertilities)
    if model is None:
        model = NAT.NatModel(cfg, np.random.default_rng(tcfg.seed))
    if init_from is not None:
        init_encoder_from_teacher(model, init_from)
    opt = AdamWarmup(list(model.named_parameters()),
                     scale=tcfg.scale_for(cfg), warmup=tcfg.warmup)
    start = time.monotonic()
    stream = _batch_stream(pairs, tcfg, fertilities=fertilities)
    for step, batch in enumerate(stream, start=1):
        res = nat_ml_step(batch, model, opt)
        if log and (step % tcfg.log_every == 0 or step == tcfg.steps):
            log.record(step=step, phase="nat", loss=res.total,
                       translation_loss=res.translation_loss,
                       fertility_loss=res.fertility_loss,
                       wall=time.monotonic() - start)
        if step >= tcfg.steps:
            break
    return model


def finetune(model: NAT.NatModel, teacher_model: AR.TeacherModel,
             pairs, fertilities, tcfg: TrainConfig,
             log: TrainingLog | None = None) -> NAT.NatModel:
    pairs, fertilities, _ = attach_fertilities(pairs, fertilities)
    opt = AdamWarmup(list(model.named_parameters()),
                     scale=tcfg.scale_for(model.cfg), warmup=tcfg.warmup)
    rng = np.random.default_rng(tcfg.seed + 1)
    start = time.monotonic()
    stream = _batch_stream(pairs, tcfg, fertilities=fertilities)
    for step, batch in enumerate(stream, start=1):
        res = finetune_step(batch, model, teacher_model, tcfg.lam, opt, rng,
                            terms=tcfg.finetune_terms,
                            kd_includes_fertility=tcfg.kd_includes_fertility)
        if log and (step % tcfg.log_every == 0 or step == tcfg.steps):
            log.record(step=step, phase="finetune", loss=res.total,
                       l_rl=res.l_rl, l_bp=res.l_bp, l_kd=res.l_kd,
                       wall=time.monotonic() - start)
        if step >= tcfg.steps:
            break
    return model


# ---------------------------------------------------------------------------
# model persistence
# ---------------------------------------------------------------------------

def save_model(path, model, src_vocab: Vocab, tgt_vocab: Vocab,
               optim: AdamWarmup | None = None, extra: dict | None = None) -> None:
    params = [(n, p.data) for n, p in model.named_parameters()]
    opt_state = optim.state_arrays() if optim else ()
    save_checkpoint(path, model.kind, model.cfg.to_dict(), params,
                    src_vocab, tgt_vocab, opt_state, extra)


def load_model(path):
    """Returns (model, src_vocab, tgt_vocab, checkpoint)."""
    ckpt = load_checkpoint(path)
    cfg = ModelConfig.from_dict(ckpt.config)
    rng = np.random.default_rng(0)
    if ckpt.kind == "teacher":
        model = AR.TeacherModel(cfg, rng)
    elif ckpt.kind == "nat":
        model = NAT.NatModel(cfg, rng)
    else:
        raise ValueError(f"unknown checkpoint kind {ckpt.kind!r}")
    table = dict(model.named_parameters())
    if set(table) != set(ckpt.params):
        missing = sorted(set(table) - set(ckpt.params))
        extra_names = sorted(set(ckpt.params) - set(table))
        raise ValueError(
            f"checkpoint parameter set mismatch: missing {missing}, "
            f"unexpected {extra_names}")
    for name, arr in ckpt.params.items():
        if table[name].data.shape != arr.shape:
            raise ValueError(f"shape mismatch for {name}")
        table[name].data[...] = arr
    return model, ckpt.src_vocab, ckpt.tgt_vocab, ckpt
