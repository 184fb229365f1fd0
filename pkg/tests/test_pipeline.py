"""Training pipeline: distillation corpus, supervised step, encoder seeding,
reverse-KL term, and the fine-tuning estimator."""

import hashlib
import json
import math

import numpy as np
import pytest

import natmt.nat as N
import natmt.pipeline as P
import natmt.teacher as AR
import natmt.tensor as T
from natmt.config import ModelConfig, TrainConfig
from natmt.data import EOS, Batch, Vocab, make_batches
from natmt.optim import AdamWarmup
from natmt.tensor import Tensor


def tiny_cfg(**kw):
    base = dict(d_model=16, d_hidden=32, n_layer=1, n_head=2,
                src_vocab=12, tgt_vocab=12, max_len=32, max_fertility=4)
    base.update(kw)
    return ModelConfig(**base)


def one_batch(pairs, fertilities=None):
    return make_batches(pairs, batch_size=len(pairs), fertilities=fertilities)[0]


def params_hash(model):
    h = hashlib.sha256()
    for name, p in model.named_parameters():
        h.update(name.encode())
        h.update(p.data.tobytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def teacher():
    model = AR.TeacherModel(tiny_cfg(), np.random.default_rng(3))
    # keep untrained decodes non-empty so tests see real token sequences
    model.proj.bias.data[EOS] = -30.0
    return model


@pytest.fixture(scope="module")
def student():
    return N.NatModel(tiny_cfg(), np.random.default_rng(4))


# ---------------------------------------------------------------------------
# distillation corpus
# ---------------------------------------------------------------------------

def test_distill_replaces_targets_with_teacher_decodes(teacher):
    pairs = [([4, 5, 6], [7, 8]), ([5, 4], [9])]
    out = P.build_distill_corpus(pairs, teacher)
    assert len(out.pairs) == len(pairs)
    for (src, _), (dsrc, dtgt) in zip(pairs, out.pairs):
        assert dsrc == src
        assert dtgt == AR.greedy_decode(src, teacher)
    again = P.build_distill_corpus(pairs, teacher)
    assert again.pairs == out.pairs


def test_distill_beam_mode_and_bad_mode(teacher):
    pairs = [([4, 5, 6], [7, 8])]
    out = P.build_distill_corpus(pairs, teacher, mode="beam", beam_width=2)
    assert out.pairs[0][1] == AR.beam_decode([4, 5, 6], teacher, b=2)
    with pytest.raises(ValueError, match="mode"):
        P.build_distill_corpus(pairs, teacher, mode="sampled")


def test_distill_empty_decode_becomes_end_marker():
    model = AR.TeacherModel(tiny_cfg(), np.random.default_rng(3))
    model.proj.bias.data[EOS] = 50.0  # decoder now emits the end marker first
    assert AR.greedy_decode([4, 5], model) == []
    with pytest.warns(UserWarning, match="empty"):
        out = P.build_distill_corpus([([4, 5], [7])], model)
    assert out.pairs == [([4, 5], [EOS])]
    assert out.replaced_empty == 1


@pytest.fixture(scope="module")
def converged_teacher():
    cfg = tiny_cfg()
    model = AR.TeacherModel(cfg, np.random.default_rng(1))
    batch = one_batch([([4, 5, 6], [7, 8, 9, 10])])
    opt = AdamWarmup(list(model.named_parameters()), scale=0.25, warmup=30)
    for _ in range(500):
        if AR.ar_train_step(batch, model, opt) < 0.005:
            break
    return model


def test_distill_fixed_point_on_memorized_pair(converged_teacher):
    out = P.build_distill_corpus([([4, 5, 6], [7, 8, 9, 10])], converged_teacher)
    assert out.pairs == [([4, 5, 6], [7, 8, 9, 10])]


# ---------------------------------------------------------------------------
# supervised step
# ---------------------------------------------------------------------------

def test_nat_ml_step_rejects_fertility_sum_mismatch():
    model = N.NatModel(tiny_cfg(), np.random.default_rng(0))
    opt = AdamWarmup(list(model.named_parameters()), scale=0.1)
    batch = one_batch([([4, 5], [7, 8, 9])], fertilities=[[1, 1]])
    with pytest.raises(ValueError, match="fertility sum 2 != target length 3"):
        P.nat_ml_step(batch, model, opt)
    batch2 = one_batch([([4, 5], [7, 8, 9])])
    with pytest.raises(ValueError, match="fertility"):
        P.nat_ml_step(batch2, model, opt)


def test_nat_ml_step_total_is_exact_sum():
    model = N.NatModel(tiny_cfg(), np.random.default_rng(0))
    opt = AdamWarmup(list(model.named_parameters()), scale=0.1)
    batch = one_batch([([4, 5], [7, 8, 9]), ([6, 4, 5], [10, 11])],
                      fertilities=[[1, 2], [1, 1, 0]])
    res = P.nat_ml_step(batch, model, opt)
    assert math.isfinite(res.translation_loss) and math.isfinite(res.fertility_loss)
    assert res.total == res.translation_loss + res.fertility_loss


def test_initial_fertility_loss_near_uniform():
    cfg = tiny_cfg(max_fertility=50, max_len=64)
    model = N.NatModel(cfg, np.random.default_rng(5))
    opt = AdamWarmup(list(model.named_parameters()), scale=0.0)  # no movement
    pairs = [([4, 5, 6, 7], [7, 8, 9, 10]), ([5, 6], [8, 9])]
    batch = one_batch(pairs, fertilities=[[1, 1, 1, 1], [1, 1]])
    res = P.nat_ml_step(batch, model, opt)
    assert abs(res.fertility_loss - math.log(50)) < 0.1 * math.log(50)


def test_single_pair_overfit_drives_both_terms_down():
    model = N.NatModel(tiny_cfg(), np.random.default_rng(2))
    opt = AdamWarmup(list(model.named_parameters()), scale=0.25, warmup=30)
    batch = one_batch([([4, 5, 6], [7, 8, 9, 10])], fertilities=[[2, 1, 1]])
    res = None
    for _ in range(1000):
        res = P.nat_ml_step(batch, model, opt)
        if res.translation_loss < 0.01 and res.fertility_loss < 0.01:
            break
    assert res.translation_loss < 0.01
    assert res.fertility_loss < 0.01
    out = N.decode_argmax([4, 5, 6], model)
    assert out.output == [7, 8, 9, 10]
    assert out.fertility == [2, 1, 1]


# ---------------------------------------------------------------------------
# encoder seeding
# ---------------------------------------------------------------------------

def test_encoder_import_copies_and_matches_outputs(teacher):
    student = N.NatModel(tiny_cfg(), np.random.default_rng(9))
    before_head = student.fert_head.weight.data.copy()
    before_dec = {n: p.data.copy() for n, p in student.named_parameters()
                  if not n.startswith("encoder.")}
    P.init_encoder_from_teacher(student, AR.export_encoder(teacher))

    src = np.array([[4, 5, 6]])
    src_len = np.array([3])
    with T.no_grad():
        t_mem = teacher.encode(src, src_len).numpy()
        s_mem = student.encode(src, src_len).numpy()
    assert np.array_equal(t_mem, s_mem)
    assert np.array_equal(student.fert_head.weight.data, before_head)
    for n, p in student.named_parameters():
        if not n.startswith("encoder."):
            assert np.array_equal(p.data, before_dec[n]), n


def test_encoder_import_errors_name_offending_keys(teacher):
    student = N.NatModel(tiny_cfg(), np.random.default_rng(9))
    exported = AR.export_encoder(teacher)
    renamed = [("encoder.bogus" if n == exported[0][0] else n, a)
               for n, a in exported]
    with pytest.raises(ValueError) as exc:
        P.init_encoder_from_teacher(student, renamed)
    assert "encoder.bogus" in str(exc.value)
    assert exported[0][0] in str(exc.value)


def test_encoder_import_rejects_other_width(teacher):
    student = N.NatModel(tiny_cfg(d_model=32, d_hidden=64),
                         np.random.default_rng(9))
    with pytest.raises(ValueError, match="shape mismatch"):
        P.init_encoder_from_teacher(student, AR.export_encoder(teacher))


# ---------------------------------------------------------------------------
# reverse-KL term
# ---------------------------------------------------------------------------

def test_rkl_one_hot_student_recovers_teacher_score(teacher, student):
    sharp = N.NatModel(tiny_cfg(), np.random.default_rng(4))
    for (_, p), (_, q) in zip(sharp.named_parameters(),
                              student.named_parameters()):
        p.data[...] = q.data
    sharp.proj.weight.data *= 300.0   # saturate the output softmax
    sharp.proj.bias.data *= 300.0
    src, fert = [4, 5, 6], [1, 2, 1]
    val = float(P.rkl_value(src, fert, sharp, teacher, with_grad=False).item())
    yhat = N.translate_given_fertility(src, fert, sharp)
    assert val == pytest.approx(AR.score_parallel(src, yhat, teacher), abs=1e-4)


def test_rkl_uniform_student_averages_teacher_logprobs(teacher):
    flat = N.NatModel(tiny_cfg(), np.random.default_rng(4))
    flat.proj.weight.data[...] = 0.0
    flat.proj.bias.data[...] = 0.0
    src, fert = [4, 5], [2, 1]
    val = float(P.rkl_value(src, fert, flat, teacher, with_grad=False).item())

    yhat = N.translate_given_fertility(src, fert, flat)
    per_pos = AR.score_parallel(src, yhat, teacher, per_position=True)
    with T.no_grad():
        mem = teacher.encode(np.array([src]), np.array([2]))
        t_in = np.array([[AR.BOS] + yhat])
        logits = teacher.decode_logits(mem, np.array([2]), t_in, np.array([4]))
        tlp = T.log_softmax(logits, axis=-1).numpy().astype(np.float64)[0]
    # the student spreads mass evenly over the eleven non-pad tokens
    want = tlp[:3, 1:].mean(axis=1).sum() + tlp[3, EOS]
    assert val == pytest.approx(want, abs=1e-5)
    # sanity: per-position teacher scores come from the same forced pass
    assert per_pos.sum() == pytest.approx(
        sum(tlp[t, y] for t, y in enumerate(yhat)) + tlp[3, EOS], abs=1e-5)


def test_rkl_gradients_reach_student_not_teacher(teacher, student):
    student.zero_grad()
    teacher.zero_grad()
    loss = T.neg(P.rkl_value([4, 5, 6], [1, 1, 1], student, teacher))
    T.backward(loss)
    assert any(p.grad is not None for _, p in student.named_parameters())
    assert all(p.grad is None for _, p in teacher.named_parameters())


# ---------------------------------------------------------------------------
# fine-tuning step
# ---------------------------------------------------------------------------

def test_finetune_rejects_bad_lambda(teacher):
    model = N.NatModel(tiny_cfg(), np.random.default_rng(6))
    opt = AdamWarmup(list(model.named_parameters()), scale=0.1)
    batch = one_batch([([4, 5], [7, 8])], fertilities=[[1, 1]])
    rng = np.random.default_rng(0)
    for bad in (-0.1, 1.5):
        with pytest.raises(ValueError, match="0, 1"):
            P.finetune_step(batch, model, teacher, bad, opt, rng)


def test_finetune_lambda_zero_equals_supervised_step(teacher):
    batch = one_batch([([4, 5], [7, 8]), ([6, 4, 5], [9, 10])],
                      fertilities=[[1, 1], [1, 1, 0]])
    a = N.NatModel(tiny_cfg(), np.random.default_rng(6))
    b = N.NatModel(tiny_cfg(), np.random.default_rng(6))
    opt_a = AdamWarmup(list(a.named_parameters()), scale=0.1)
    opt_b = AdamWarmup(list(b.named_parameters()), scale=0.1)
    res = P.finetune_step(batch, a, teacher, 0.0, opt_a, np.random.default_rng(0))
    ml = P.nat_ml_step(batch, b, opt_b)
    assert res.l_kd == ml.total
    assert res.l_rl == 0.0 and res.l_bp == 0.0
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        assert np.array_equal(pa.data, pb.data), na


def test_finetune_point_mass_sample_has_zero_rl_gradient(teacher):
    model = N.NatModel(tiny_cfg(), np.random.default_rng(6))
    model.fert_head.weight.data[...] = 0.0
    model.fert_head.bias.data[...] = np.array([-30.0, 5.0, -30.0, -30.0])
    before = {n: p.data.copy() for n, p in model.named_parameters()}
    opt = AdamWarmup(list(model.named_parameters()), scale=0.1)
    batch = one_batch([([4, 5], [7, 8])], fertilities=[[1, 1]])
    res = P.finetune_step(batch, model, teacher, 1.0, opt,
                          np.random.default_rng(0), terms=("rl",))
    assert res.l_bp == 0.0 and res.l_kd == 0.0
    for n, p in model.named_parameters():
        assert np.array_equal(p.data, before[n]), n


def test_finetune_teacher_stays_frozen(teacher):
    model = N.NatModel(tiny_cfg(), np.random.default_rng(6))
    opt = AdamWarmup(list(model.named_parameters()), scale=0.1)
    batch = one_batch([([4, 5], [7, 8]), ([6, 4], [9])],
                      fertilities=[[1, 1], [1, 0]])
    frozen = params_hash(teacher)
    res = P.finetune_step(batch, model, teacher, 0.25, opt,
                          np.random.default_rng(1))
    assert params_hash(teacher) == frozen
    for v in (res.l_rl, res.l_bp, res.l_kd, res.total):
        assert math.isfinite(v)
    assert res.total == pytest.approx(
        0.25 * (res.l_rl + res.l_bp) + 0.75 * res.l_kd)


def test_reinforce_expectation_matches_exact_gradient(teacher):
    # two positions, three fertility classes: enumerate all nine outcomes
    cfg = tiny_cfg(max_fertility=3)
    model = N.NatModel(cfg, np.random.default_rng(8))
    model.fert_head.weight.data[...] = 0.0
    row = np.array([0.2, 0.5, 0.3])
    model.fert_head.bias.data[...] = np.log(row).astype(np.float32)
    src = [4, 5]
    probs = N.predict_fertility(src, model)
    p_row = probs[0].astype(np.float64)

    expected = (probs * np.arange(3)[None, :]).sum(axis=-1)
    f_bar = N.floor_fertility(N.round_half_away(expected), probs)
    baseline = float(P.rkl_value(src, f_bar, model, teacher,
                                 with_grad=False).item())

    bias = model.fert_head.bias
    estimate = np.zeros(3, dtype=np.float64)
    exact = np.zeros(3, dtype=np.float64)
    for f1 in range(3):
        for f2 in range(3):
            f = np.array([f1, f2])
            p_f = p_row[f1] * p_row[f2]
            f_tr = N.floor_fertility(f, probs)
            reward = float(P.rkl_value(src, f_tr, model, teacher,
                                       with_grad=False).item())
            model.zero_grad()
            T.backward(P.fertility_log_prob(src, f, model))
            score = bias.grad.astype(np.float64)
            estimate += p_f * (reward - baseline) * score
            exact += reward * p_f * score   # d p(f)/d b = p(f) * d log p / d b
    assert np.allclose(estimate, exact, atol=1e-6)
    # independent closed form for the score function
    f = np.array([2, 0])
    model.zero_grad()
    T.backward(P.fertility_log_prob(src, f, model))
    onehots = np.eye(3)[f].sum(axis=0)
    assert np.allclose(bias.grad, onehots - 2 * p_row, atol=1e-5)


# ---------------------------------------------------------------------------
# loops, logging, persistence
# ---------------------------------------------------------------------------

def test_attach_fertilities_drops_mismatches():
    pairs = [([4, 5], [7, 8]), ([6, 4], [9, 10, 11])]
    ferts = [[1, 1], [1, 1]]
    with pytest.warns(UserWarning, match="dropped 1"):
        kept, kf, dropped = P.attach_fertilities(pairs, ferts)
    assert kept == [([4, 5], [7, 8])]
    assert kf == [[1, 1]]
    assert dropped == 1


def test_training_loops_log_jsonl(tmp_path):
    cfg = tiny_cfg()
    tcfg = TrainConfig(steps=3, batch_size=2, warmup=10, seed=0, log_every=1,
                       lam=0.25)
    pairs = [([4, 5], [7, 8]), ([6, 4, 5], [9, 10]), ([5, 6], [8])]
    ferts = [[1, 1], [1, 1, 0], [1, 0]]
    log = P.TrainingLog(tmp_path / "run.jsonl")

    teacher_model = P.train_teacher(pairs, cfg, tcfg, log)
    nat_model = P.train_nat(pairs, ferts, cfg, tcfg, log,
                            init_from=AR.export_encoder(teacher_model))
    P.finetune(nat_model, teacher_model, pairs, ferts, tcfg, log)

    lines = [json.loads(l) for l in
             (tmp_path / "run.jsonl").read_text().splitlines()]
    assert len(lines) == 9
    phases = [l["phase"] for l in lines]
    assert phases == ["teacher"] * 3 + ["nat"] * 3 + ["finetune"] * 3
    for l in lines:
        assert set(l) >= {"step", "phase", "loss", "wall"}
        assert math.isfinite(l["loss"])
    assert {"l_rl", "l_bp", "l_kd"} <= set(lines[-1])
    assert {"translation_loss", "fertility_loss"} <= set(lines[4])


def test_model_save_load_round_trip(tmp_path, teacher):
    sv = Vocab(["a", "b"])
    tv = Vocab(["c"])
    path = tmp_path / "m.nat"
    P.save_model(path, teacher, sv, tv, extra={"note": 1})
    loaded, lsv, ltv, ckpt = P.load_model(path)
    assert isinstance(loaded, AR.TeacherModel)
    assert lsv.tokens == sv.tokens and ltv.tokens == tv.tokens
    assert ckpt.extra == {"note": 1}
    for (n, p), (m, q) in zip(teacher.named_parameters(),
                              loaded.named_parameters()):
        assert n == m and np.array_equal(p.data, q.data)

    nat_model = N.NatModel(tiny_cfg(), np.random.default_rng(0))
    P.save_model(tmp_path / "n.nat", nat_model, sv, tv)
    loaded2, *_ = P.load_model(tmp_path / "n.nat")
    assert isinstance(loaded2, N.NatModel)
