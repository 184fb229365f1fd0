"""Autoregressive transformer used three ways: distillation teacher, parallel
scorer of candidate translations, and the latency baseline.

The decoder counts one "pass" per sequence per forward call, so a greedy
decode of T tokens costs T+1 passes (each token plus the end marker) and
scoring s candidates costs s passes however they are batched.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .data import BOS, EOS, PAD, Batch, pad_block
from .layers import (Embedding, Encoder, FFNBlock, LayerNorm, Linear, Module,
                     MultiHeadAttention, attention_bias, causal_mask,
                     positional_table)
from .tensor import DTYPE, Tensor


class DecoderLayer(Module):
    """Causal self-attention, encoder-decoder attention, FFN; post-norm."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.self_attn = MultiHeadAttention(cfg, rng)
        self.norm_self = LayerNorm(cfg.d_model)
        self.cross_attn = MultiHeadAttention(cfg, rng)
        self.norm_cross = LayerNorm(cfg.d_model)
        self.ffn = FFNBlock(cfg, rng)
        self.norm_ffn = LayerNorm(cfg.d_model)

    def __call__(self, x: Tensor, memory: Tensor,
                 self_bias: np.ndarray, cross_bias: np.ndarray) -> Tensor:
        x = self.norm_self(T.add(x, self.self_attn(x, x, x, self_bias)))
        x = self.norm_cross(T.add(x, self.cross_attn(x, memory, memory, cross_bias)))
        return self.norm_ffn(T.add(x, self.ffn(x)))


class TeacherModel(Module):
    kind = "teacher"

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.encoder = Encoder(cfg, rng)
        self.embed = Embedding(cfg.tgt_vocab, cfg.d_model, rng)
        self.norm_in = LayerNorm(cfg.d_model)
        self.layers = [DecoderLayer(cfg, rng) for _ in range(cfg.n_layer)]
        self.proj = Linear(cfg.d_model, cfg.tgt_vocab, rng)
        self.embed_scale = math.sqrt(cfg.d_model) if cfg.scale_embeddings else 1.0
        self.pos = positional_table(cfg.max_len, cfg.d_model)
        self.decoder_passes = 0

    def reset_passes(self) -> None:
        self.decoder_passes = 0

    def encode(self, src: np.ndarray, src_len: np.ndarray) -> Tensor:
        return self.encoder(src, src_len)

    def embed_targets(self, ids: np.ndarray) -> Tensor:
        b, t = ids.shape
        if t > self.cfg.max_len:
            raise ValueError(f"target length {t} exceeds max_len {self.cfg.max_len}")
        emb = T.mul(self.embed(ids), Tensor(np.float32(self.embed_scale)))
        emb = T.add(emb, Tensor(np.broadcast_to(self.pos[:t], (b, t, emb.shape[-1])).copy()))
        return self.norm_in(emb)

    def decode_logits(self, memory: Tensor, src_len: np.ndarray,
                      tgt_in: np.ndarray, tgt_in_len: np.ndarray) -> Tensor:
        b, t = tgt_in.shape
        self.decoder_passes += b
        self_bias = attention_bias(causal_mask(t), tgt_in_len, t, t)
        cross_bias = attention_bias(None, src_len, t, memory.shape[1])
        x = self.embed_targets(tgt_in)
        for layer in self.layers:
            x = layer(x, memory, self_bias, cross_bias)
        return self.proj(x)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def shift_targets(tgt: np.ndarray, tgt_len: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Teacher-forcing tensors: inputs bos+y, targets y+eos, both [B, T+1]."""
    b, t = tgt.shape
    dec_in = np.full((b, t + 1), PAD, dtype=np.int64)
    dec_tgt = np.full((b, t + 1), PAD, dtype=np.int64)
    dec_in[:, 0] = BOS
    dec_in[:, 1:] = tgt
    dec_tgt[:, :t] = tgt
    dec_tgt[np.arange(b), tgt_len] = EOS
    # positions past each sentence stay PAD on both sides
    cols = np.arange(t + 1)[None, :]
    dec_in[cols > tgt_len[:, None]] = PAD
    return dec_in, dec_tgt


def ar_train_step(batch: Batch, model: TeacherModel, optim) -> float:
    """One teacher-forced cross-entropy step; returns the mean per-token loss
    (end marker included as a predicted position)."""
    if batch.size == 0:
        raise ValueError("empty batch")
    dec_in, dec_tgt = shift_targets(batch.tgt, batch.tgt_len)
    memory = model.encode(batch.src, batch.src_len)
    logits = model.decode_logits(memory, batch.src_len, dec_in, batch.tgt_len + 1)
    valid = np.arange(dec_tgt.shape[1])[None, :] <= batch.tgt_len[:, None]
    loss = T.cross_entropy(T.log_softmax(logits, axis=-1), dec_tgt,
                           pad_id=PAD, mask=valid)
    model.zero_grad()
    T.backward(loss)
    optim.step()
    return float(loss.item())


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

def default_max_len(src_len: int) -> int:
    return 2 * src_len + 5


def _clamp_max_len(model: TeacherModel, max_len: int) -> int:
    # decoder input carries a leading bos, so emitted length tops out one short
    return max(0, min(max_len, model.cfg.max_len - 1))


def _step_logprobs(model: TeacherModel, memory: Tensor, src_len: np.ndarray,
                   prefixes: list[list[int]]) -> np.ndarray:
    """Next-token log-probs [n, V] for bos-prefixed contexts, one decoder pass
    counted per prefix."""
    arr, lens = pad_block(prefixes)
    mem = memory
    slen = src_len
    if arr.shape[0] > 1:
        reps = arr.shape[0]
        mem = T.Tensor(np.repeat(memory.data, reps, axis=0))
        slen = np.repeat(src_len, reps)
    logits = model.decode_logits(mem, slen, arr, lens)
    logp = T.log_softmax(logits, axis=-1).numpy().astype(np.float64)
    return logp[np.arange(len(prefixes)), lens - 1]


def greedy_decode(src_ids: Sequence[int], model: TeacherModel,
                  max_len: int | None = None) -> list[int]:
    """Left-to-right argmax decoding; ties go to the lowest token id."""
    if max_len is None:
        max_len = default_max_len(len(src_ids))
    max_len = _clamp_max_len(model, max_len)
    if max_len == 0:
        return []
    src = np.asarray(src_ids, dtype=np.int64)[None, :]
    src_len = np.array([len(src_ids)])
    out: list[int] = []
    with T.no_grad():
        memory = model.encode(src, src_len)
        for _ in range(max_len + 1):
            logp = _step_logprobs(model, memory, src_len, [[BOS] + out])[0]
            tok = int(np.argmax(logp))
            if tok == EOS:
                break
            out.append(tok)
            if len(out) == max_len:
                break
    return out


def beam_core(step_fn, b: int, max_len: int) -> list[int]:
    """Beam search over a step function mapping bos-prefixed token lists to
    next-token log-prob rows. Hypotheses are compared by raw summed log-prob
    (no length normalization); the end-marker's log-prob is part of the score.
    """
    if b < 1:
        raise ValueError("beam width must be >= 1")
    if max_len == 0:
        return []
    unfinished: list[tuple[float, list[int]]] = [(0.0, [])]
    finished: list[tuple[float, list[int]]] = []
    capped: list[tuple[float, list[int]]] = []
    while unfinished:
        best_open = max(s for s, _ in unfinished)
        if finished and max(s for s, _ in finished) >= best_open:
            break  # log-probs only decrease; no open hypothesis can win
        logp = step_fn([[BOS] + toks for _, toks in unfinished])
        expansions: list[tuple[float, int, int]] = []  # score, beam idx, token
        for i, (score, _) in enumerate(unfinished):
            row = logp[i]
            # top-b tokens per row suffice to fill b survivors; ties keep the
            # lowest token id, matching the greedy tie-break
            for tok in np.argsort(-row, kind="stable")[:b]:
                expansions.append((score + float(row[tok]), i, int(tok)))
        expansions.sort(key=lambda e: (-e[0], e[2], e[1]))
        nxt: list[tuple[float, list[int]]] = []
        for score, i, tok in expansions:
            if tok == EOS:
                finished.append((score, unfinished[i][1]))
            else:
                hyp = unfinished[i][1] + [tok]
                if len(hyp) >= max_len:
                    capped.append((score, hyp))
                else:
                    nxt.append((score, hyp))
            if len(nxt) == b:
                break
        unfinished = nxt
    pool = finished or capped
    return max(pool, key=lambda h: h[0])[1] if pool else []


def beam_decode(src_ids: Sequence[int], model: TeacherModel, b: int,
                max_len: int | None = None) -> list[int]:
    if max_len is None:
        max_len = default_max_len(len(src_ids))
    max_len = _clamp_max_len(model, max_len)
    src = np.asarray(src_ids, dtype=np.int64)[None, :]
    src_len = np.array([len(src_ids)])
    with T.no_grad():
        memory = model.encode(src, src_len)

        def step(prefixes):
            return _step_logprobs(model, memory, src_len, prefixes)

        return beam_core(step, b, max_len)


# ---------------------------------------------------------------------------
# parallel scoring
# ---------------------------------------------------------------------------

def score_parallel(src_ids: Sequence[int], candidate: Sequence[int],
                   model: TeacherModel, per_position: bool = False):
    """Log-probability of a candidate in one teacher-forced decoder pass:
    sum over its tokens plus the end marker."""
    out = score_candidates(src_ids, [candidate], model, per_position)
    return out[0]


def score_candidates(src_ids: Sequence[int], candidates: Sequence[Sequence[int]],
                     model: TeacherModel, per_position: bool = False) -> list:
    for cand in candidates:
        if PAD in cand:
            raise ValueError("candidate contains pad tokens")
    src = np.asarray(src_ids, dtype=np.int64)[None, :]
    src_len = np.array([len(src_ids)])
    dec_in, lens = pad_block([[BOS] + list(c) for c in candidates])
    picked, _ = pad_block([list(c) + [EOS] for c in candidates],
                          width=dec_in.shape[1])
    n = len(candidates)
    with T.no_grad():
        memory = model.encode(src, src_len)
        mem = T.Tensor(np.repeat(memory.data, n, axis=0)) if n > 1 else memory
        logits = model.decode_logits(mem, np.repeat(src_len, n), dec_in, lens)
        logp = T.log_softmax(logits, axis=-1).numpy().astype(np.float64)
    rows = np.arange(dec_in.shape[1])[None, :]
    gathered = np.take_along_axis(logp, picked[:, :, None], axis=2)[:, :, 0]
    valid = rows < lens[:, None]
    if per_position:
        return [gathered[i, : lens[i]] for i in range(n)]
    return [float((gathered[i] * valid[i]).sum()) for i in range(n)]


# ---------------------------------------------------------------------------
# encoder export
# ---------------------------------------------------------------------------

def export_encoder(model: TeacherModel) -> list[tuple[str, np.ndarray]]:
    """Encoder-side parameters (source embeddings included) under canonical
    names, as array copies detached from the model."""
    return [(name, p.data.copy()) for name, p in model.named_parameters()
            if name.startswith("encoder.")]
