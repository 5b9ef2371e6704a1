import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mts2s import data as dt
from mts2s import decoding as dc
from mts2s import multitask as mt
from mts2s import training as tr
from mts2s.numerics import ContractError, DomainError


def small_store(seed=0, dtype=np.float64):
    plan = mt.SharingPlan.build()
    return plan, mt.ParameterStore.initialize(plan, mt.ModelDims(4, 9, 3, 2), 0.3, seed, dtype=dtype)


def rand_grads(p, seed=0, groups=None):
    rng = np.random.default_rng(seed)
    return {g: {n: rng.normal(size=a.shape).astype(a.dtype) for n, a in d.items()}
            for g, d in p.groups.items() if groups is None or g in groups}


# ---------------------------------------------------------------------------
# Adam


def test_adam_zero_gradient_leaves_parameters():
    _, p = small_store()
    before = p.copy()
    opt = tr.OptimizerState.for_params(p, 1e-3)
    tr.adam_step(p, {g: {n: np.zeros_like(a) for n, a in d.items()} for g, d in p.groups.items()}, opt)
    assert p.equal(before) and opt.t == 1


def test_adam_first_step_is_lr_times_sign():
    _, p = small_store()
    before = p.copy()
    g = rand_grads(p)
    tr.adam_step(p, g, tr.OptimizerState.for_params(p, 1e-3))
    for gid, d in g.items():
        for n, gr in d.items():
            step = before[gid][n] - p[gid][n]
            assert np.allclose(step, 1e-3 * gr / (np.abs(gr) + 1e-8), rtol=1e-9, atol=0)
            assert np.array_equal(np.sign(step), np.sign(gr))
            assert np.abs(np.abs(step) - 1e-3).max() <= 1.01e-3 * 1e-8 / np.abs(gr).min()


def test_adam_matches_reference_over_steps():
    _, p = small_store()
    ref = {g: {n: a.copy() for n, a in d.items()} for g, d in p.groups.items()}
    m = {g: {n: np.zeros_like(a) for n, a in d.items()} for g, d in ref.items()}
    v = {g: {n: np.zeros_like(a) for n, a in d.items()} for g, d in ref.items()}
    opt = tr.OptimizerState.for_params(p, 0.01)
    for t in range(1, 6):
        g = rand_grads(p, seed=t)
        tr.adam_step(p, g, opt)
        for gid in g:
            for n in g[gid]:
                m[gid][n] = 0.9 * m[gid][n] + 0.1 * g[gid][n]
                v[gid][n] = 0.999 * v[gid][n] + 0.001 * g[gid][n] ** 2
                mh = m[gid][n] / (1 - 0.9 ** t)
                vh = v[gid][n] / (1 - 0.999 ** t)
                ref[gid][n] -= 0.01 * mh / (np.sqrt(vh) + 1e-8)
    for gid in ref:
        for n in ref[gid]:
            assert np.allclose(p[gid][n], ref[gid][n], atol=1e-12)


def test_adam_leaves_unused_groups_bit_identical():
    plan, p = small_store(dtype=np.float32)
    opt = tr.OptimizerState.for_params(p, 1e-2)
    before, m_before = p.copy(), {g: {n: a.copy() for n, a in d.items()} for g, d in opt.m.items()}
    rng = np.random.default_rng(0)
    b = mt.caption_batch([rng.normal(size=(3, 4)).astype(np.float32)], [[4, 5]])
    _, g = mt.captioning_loss(b, p, plan)
    tr.adam_step(p, g, opt)
    used = set(g)
    assert used == {"visual_embedding", "video_encoder", "captioning_attention", "language_decoder"}
    for gid in p.groups:
        same = all(np.array_equal(before[gid][n], p[gid][n]) for n in p[gid])
        assert same == (gid not in used)
        if gid not in used:
            assert all(np.array_equal(m_before[gid][n], opt.m[gid][n]) for n in p[gid])


def test_shared_group_update_visible_from_every_task():
    plan, p = small_store()
    g = rand_grads(p, groups={"language_decoder"})
    tr.adam_step(p, g, tr.OptimizerState.for_params(p, 0.1))
    _, w_cap = mt._resolve(p, plan, mt.TaskKind.CAPTIONING)
    _, w_ent = mt._resolve(p, plan, mt.TaskKind.ENTAILMENT)
    assert w_cap["decoder"]["W"] is w_ent["decoder"]["W"]


def test_adam_rejects_misaligned_gradients():
    _, p = small_store()
    with pytest.raises(ContractError):
        tr.adam_step(p, {"language_decoder": {"W": np.zeros((1, 1))}}, tr.OptimizerState.for_params(p, 1e-3))


# ---------------------------------------------------------------------------
# clipping, dropout, init


def test_clipping_keeps_direction():
    _, p = small_store()
    g = rand_grads(p)
    flat = np.concatenate([a.ravel() for d in g.values() for a in d.values()])
    norm = tr.clip_gradients(g, 1.0)
    assert norm == pytest.approx(np.linalg.norm(flat))
    after = np.concatenate([a.ravel() for d in g.values() for a in d.values()])
    assert np.linalg.norm(after) == pytest.approx(1.0)
    assert np.allclose(after * norm, flat)


def test_clipping_below_threshold_is_noop():
    g = {"a": {"x": np.array([0.3, 0.4])}}
    assert tr.clip_gradients(g, 5.0) == pytest.approx(0.5)
    assert np.array_equal(g["a"]["x"], [0.3, 0.4])


def test_dropout_statistics():
    rng = np.random.default_rng(0)
    x = np.ones(200_000)
    y = tr.apply_dropout(x, 0.3, True, rng)
    assert abs((y == 0).mean() - 0.3) < 0.005
    assert abs(y.mean() - 1.0) < 0.01
    assert set(np.unique(y)) == {0.0, 1 / 0.7}
    assert tr.apply_dropout(x, 0.3, False) is x
    with pytest.raises(DomainError):
        tr.apply_dropout(x, 1.0, True, rng)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 0.5), st.integers(0, 1000))
def test_init_within_range(r, seed):
    cfg = tr.TrainConfig(init_range=r, hidden=4, embed=3, seed=seed)
    p = tr.init_parameters(cfg, 5, 11)
    for _, name, a in p.items():
        assert a.dtype == np.float32
        assert np.all(np.abs(a) <= np.float32(r))
        if mt.is_bias(name):
            assert not a.any()


# ---------------------------------------------------------------------------
# configuration


def test_config_validation():
    with pytest.raises(DomainError):
        tr.TrainConfig(hidden=0)
    with pytest.raises(DomainError):
        tr.TrainConfig(dropout=1.0)
    with pytest.raises(DomainError):
        tr.TrainConfig(ratio="0:0:0")
    with pytest.raises(DomainError):
        tr.TrainConfig.from_dict({"hiden": 3})
    with pytest.raises(DomainError):
        tr.profile("nope")


def test_full_size_profile():
    c = tr.profile("paper")
    assert (c.hidden, c.embed, c.dropout, c.learning_rate, c.batch_size, c.ratio, c.init_range) == \
        (1024, 512, 0.5, 1e-4, 32, "100:100:50", 0.05)
    assert tr.profile("desk") == tr.TrainConfig()


def test_config_file(tmp_path):
    f = tmp_path / "c.cfg"
    f.write_text("# comment\nhidden = 12\nratio = 2:1:1   # mix\nclip_norm = null\nshare_attention = true\n")
    d = tr.parse_config_file(f)
    assert d == {"hidden": 12, "ratio": "2:1:1", "clip_norm": None, "share_attention": True}
    assert tr.TrainConfig.from_dict(d).hidden == 12
    f.write_text("hidden 12\n")
    with pytest.raises(DomainError, match=":1:"):
        tr.parse_config_file(f)


# ---------------------------------------------------------------------------
# training runs


CAPTIONS = [["a", "red", "ball", "rolls"], ["the", "green", "cube", "spins"], ["one", "blue", "cone", "falls"]]


def tiny_data(clips=False, pairs=False):
    rng = np.random.default_rng(0)
    vocab = dt.build_vocab(CAPTIONS)
    feats = [rng.normal(size=(4, 6)).astype(np.float32) for _ in CAPTIONS]
    caps = [(f, vocab.encode(c)) for f, c in zip(feats, CAPTIONS)]
    return tr.TrainData(6, vocab, caps, feats, [[vocab.encode(c)] for c in CAPTIONS],
                        clips=[np.tile(rng.normal(size=6), (10, 1)).astype(np.float32)] * 4 if clips else [],
                        pairs=[(vocab.encode(CAPTIONS[0]), vocab.encode(CAPTIONS[1]))] if pairs else [])


FAST = dict(hidden=16, embed=8, batch_size=3, learning_rate=1e-2, init_range=0.1)


def test_overfits_three_captions(tmp_path):
    data = tiny_data()
    res = tr.train(tr.TrainConfig(max_updates=150, val_interval=50, **FAST), data, log_path=tmp_path / "log.jsonl")
    hyps = dc.greedy_decode([res.best.model()], data.val_features)
    assert [data.vocab.decode(h) for h in hyps] == CAPTIONS
    assert res.best.scores["bleu4"] == pytest.approx(1.0)
    lines = [json.loads(x) for x in (tmp_path / "log.jsonl").read_text().splitlines()]
    ups = [x for x in lines if x["type"] == "update"]
    assert len(ups) == 150 and ups[-1]["loss"] < ups[0]["loss"] / 10
    assert sum(x["type"] == "validation" for x in lines) == 3


def test_training_is_deterministic():
    data = tiny_data(clips=True, pairs=True)
    cfg = tr.TrainConfig(max_updates=12, val_interval=6, ratio="1:1:1", dropout=0.2, **FAST)
    a = tr.train(cfg, data).final.params
    b = tr.train(cfg, data).final.params
    assert a.equal(b)
    c = tr.train(cfg.replace(seed=1), data).final.params
    assert not a.equal(c)


def test_rollout_after_overfitting_constant_clips():
    data = tiny_data(clips=True)
    cfg = tr.TrainConfig(max_updates=300, val_interval=300, ratio="0:1:0", **FAST)
    target = data.clips[0][0]
    init = tr.init_parameters(cfg, 6, data.vocab_size)
    plan = cfg.plan()

    def err(params):
        out = dc.rollout_frames(params, plan, data.clips[0][:8], 2)
        return float(np.sum((out - target) ** 2))

    before = err(init)
    res = tr.train(cfg, data, params=init.copy())
    assert err(res.final.params) < 0.01 * before


def test_missing_task_data_is_reported():
    with pytest.raises(ContractError, match="video_prediction"):
        tr.train(tr.TrainConfig(max_updates=2, ratio="1:1:0", **FAST), tiny_data())


def test_nan_aborts_with_update_and_task():
    data = tiny_data()
    cfg = tr.TrainConfig(max_updates=5, **FAST)
    p = tr.init_parameters(cfg, 6, data.vocab_size)
    p["language_decoder"]["out_W"][0, 0] = np.nan
    with pytest.raises(tr.TrainingDiverged, match=r"update 1 \(captioning"):
        tr.train(cfg, data, params=p)


def test_ensemble_seeds_differ():
    data = tiny_data()
    cks = tr.train_ensemble(tr.TrainConfig(max_updates=3, val_interval=3, **FAST), 2, data)
    assert [c.config.seed for c in cks] == [0, 1]
    assert not cks[0].params.equal(cks[1].params)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(tmp_path):
    data = tiny_data()
    res = tr.train(tr.TrainConfig(max_updates=10, val_interval=5, **FAST), data)
    path = tmp_path / "m.ckpt"
    tr.save_checkpoint(res.final, path)
    back = tr.load_checkpoint(path)
    assert back.params.equal(res.final.params)
    assert back.opt.t == res.final.opt.t == 10
    for gid in res.final.opt.m:
        for n in res.final.opt.m[gid]:
            assert np.array_equal(back.opt.m[gid][n], res.final.opt.m[gid][n])
            assert np.array_equal(back.opt.v[gid][n], res.final.opt.v[gid][n])
    assert back.config == res.final.config and back.plan == res.final.plan
    assert back.vocab.itos == data.vocab.itos
    a = dc.Model(res.final.params, res.final.plan)
    b = back.model()
    ea, eb = a.encode(data.val_features), b.encode(data.val_features)
    rows = np.arange(3)
    la, _ = a.step(ea, rows, ea.initial(rows), np.full(3, mt.BOS))
    lb, _ = b.step(eb, rows, eb.initial(rows), np.full(3, mt.BOS))
    assert np.array_equal(la, lb)
    tr.save_checkpoint(back, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_corrupt_checkpoints(tmp_path):
    data = tiny_data()
    res = tr.train(tr.TrainConfig(max_updates=1, val_interval=1, **FAST), data)
    path = tmp_path / "m.ckpt"
    tr.save_checkpoint(res.final, path)
    raw = path.read_bytes()
    for name, blob in (("magic", b"XXXXXXX" + raw[7:]), ("short", raw[:-4]), ("tail", raw + b"\0"),
                       ("head", raw[:10])):
        bad = tmp_path / f"{name}.ckpt"
        bad.write_bytes(blob)
        with pytest.raises(tr.CheckpointError):
            tr.load_checkpoint(bad)
