import math

import numpy as np
import pytest

from barbert.encoder import ModelConfig, init_params
from barbert.remi import build_vocab
from barbert.synth import synth_corpus
from barbert.trainer import (
    FORMAT_VERSION,
    MAGIC,
    Adam,
    Corpus,
    CorruptCheckpoint,
    TrainConfig,
    VersionMismatch,
    build_pair_batch,
    evaluate,
    load_checkpoint,
    loss_and_grads,
    save_checkpoint,
    split_by_song,
    train,
)


@pytest.fixture(scope="module")
def bars():
    return synth_corpus(6, 4, seed=11)[0]


def small_model():
    return ModelConfig(num_layers=2, hidden_size=16, num_heads=2, ffn_size=32, max_seq_len=160)


def test_checkpoint_round_trip(tmp_path, tiny_config):
    params = init_params(tiny_config, np.random.default_rng(0))
    cfg = TrainConfig(variant="aug", steps=3)
    save_checkpoint(params, tiny_config, tmp_path / "m.ckpt", cfg)
    loaded, mcfg, tcfg = load_checkpoint(tmp_path / "m.ckpt", expected=tiny_config)
    assert mcfg == tiny_config and tcfg == cfg
    assert all(np.array_equal(params[k], loaded[k]) for k in params)
    blob = (tmp_path / "m.ckpt").read_bytes()
    assert blob.startswith(MAGIC)
    save_checkpoint(loaded, mcfg, tmp_path / "again.ckpt", tcfg)
    assert (tmp_path / "again.ckpt").read_bytes() == blob


def test_checkpoint_truncated(tmp_path, tiny_config):
    params = init_params(tiny_config, np.random.default_rng(0))
    path = tmp_path / "m.ckpt"
    save_checkpoint(params, tiny_config, path)
    blob = path.read_bytes()
    for cut in (5, len(blob) // 2, len(blob) - 1):
        path.write_bytes(blob[:cut])
        with pytest.raises(CorruptCheckpoint):
            load_checkpoint(path)
    damaged = bytearray(blob)
    damaged[len(blob) // 2] ^= 0xFF
    path.write_bytes(bytes(damaged))
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(path)


def test_checkpoint_version_and_config_mismatch(tmp_path, tiny_config):
    params = init_params(tiny_config, np.random.default_rng(0))
    path = tmp_path / "m.ckpt"
    save_checkpoint(params, tiny_config, path)
    with pytest.raises(VersionMismatch):
        load_checkpoint(path, expected=ModelConfig())
    blob = bytearray(path.read_bytes())
    blob[len(MAGIC)] = FORMAT_VERSION + 1
    path.write_bytes(bytes(blob))
    with pytest.raises(VersionMismatch):
        load_checkpoint(path)


def test_split_is_by_song(bars):
    train_bars, val_bars = split_by_song(bars, 0.34, seed=1)
    assert {b.song_id for b in train_bars}.isdisjoint({b.song_id for b in val_bars})
    assert len({b.song_id for b in val_bars}) == 2
    assert len(train_bars) + len(val_bars) == len(bars)
    assert split_by_song(bars, 0.0, 1)[1] == []


@pytest.mark.parametrize("variant", ["bert", "aug", "neighbor", "dropout"])
def test_pair_batches(bars, variant):
    corpus = Corpus(bars)
    batch = build_pair_batch(variant, corpus, seed=0, step=3, batch_size=5)
    assert len(batch.view_a) == 5
    vocab = build_vocab()
    for view, anchor in zip(batch.view_a, batch.anchors):
        sel = view.mlm_targets != -100
        assert np.array_equal(view.mlm_targets[sel], np.asarray(anchor.ids)[sel])
    if variant == "bert":
        assert batch.view_b == []
        return
    assert len(batch.view_b) == 5
    for a, p, vb, va in zip(batch.anchors, batch.partners, batch.view_b, batch.view_a):
        if variant == "dropout":
            assert np.array_equal(vb, va.input_ids)
        elif variant == "neighbor":
            assert p.song_id == a.song_id and p.bar_index != a.bar_index
        else:
            ids_a, ids_p = np.asarray(a.ids), np.asarray(p.ids)
            assert len(ids_a) == len(ids_p)
            p0 = vocab.offsets["pitch"]
            is_pitch = (ids_a >= p0) & (ids_a < p0 + 128)
            # one shared transposition, unless clamped at the range edge
            inner = is_pitch & (ids_p > p0) & (ids_p < p0 + 127)
            assert len(set((ids_p[inner] - ids_a[inner]).tolist())) <= 1
            assert np.array_equal(ids_p[~is_pitch & (ids_a < vocab.offsets["velocity"])],
                                  ids_a[~is_pitch & (ids_a < vocab.offsets["velocity"])])


def test_pair_batch_is_seeded(bars):
    corpus = Corpus(bars)
    a = build_pair_batch("aug", corpus, 4, 7, 4)
    b = build_pair_batch("aug", corpus, 4, 7, 4)
    assert all(np.array_equal(x.input_ids, y.input_ids) for x, y in zip(a.view_a, b.view_a))
    assert all(np.array_equal(x, y) for x, y in zip(a.view_b, b.view_b))


def test_alpha_zero_matches_bert(bars):
    mc = small_model()
    params = init_params(mc, np.random.default_rng(0))
    corpus = Corpus(bars)
    batch = build_pair_batch("aug", corpus, 0, 0, 4)
    bert = TrainConfig(variant="bert")
    aug0 = TrainConfig(variant="aug", alpha=0.0)
    r1, g1 = loss_and_grads(params, batch, mc, bert, 0, 0)
    r2, g2 = loss_and_grads(params, batch, mc, aug0, 0, 0)
    assert r1.mlm_loss == r2.mlm_loss and r2.total == r2.mlm_loss
    assert math.isnan(r1.ntxent_accuracy) and not math.isnan(r2.ntxent_accuracy)
    assert all(np.array_equal(g1[k], g2[k]) for k in g1)


def test_adam_schedule():
    params = {"w": np.zeros(2)}
    opt = Adam(params, TrainConfig(steps=100, learning_rate=1.0, warmup_fraction=0.1))
    assert opt.lr(0) == pytest.approx(0.1) and opt.lr(9) == pytest.approx(1.0)
    assert opt.lr(10) == pytest.approx(1.0) and opt.lr(55) == pytest.approx(0.5)
    assert opt.lr(100) == 0.0


def test_adam_first_step_is_lr_times_sign():
    params = {"w": np.array([1.0, 1.0])}
    opt = Adam(params, TrainConfig(steps=10, learning_rate=0.01))
    opt.update(params, {"w": np.array([3.0, -0.5])}, 0)
    np.testing.assert_allclose(params["w"], [1.0 - 0.01, 1.0 + 0.01], atol=1e-8)


@pytest.mark.parametrize("variant", ["bert", "aug", "neighbor", "dropout"])
def test_training_is_deterministic_and_finite(bars, variant, tmp_path):
    mc = small_model()
    tc = TrainConfig(variant=variant, steps=6, batch_size=4, learning_rate=1e-3, seed=3)
    p1, h1, split = train(bars, mc, tc, out_dir=tmp_path)
    p2, h2, _ = train(bars, mc, tc, threads=3)
    assert all(np.array_equal(p1[k], p2[k]) for k in p1)
    assert [r.total for r in h1] == [r.total for r in h2]
    assert all(np.isfinite(r.total) for r in h1)
    assert len((tmp_path / "train_log.csv").read_text().splitlines()) == 2 + 6
    assert {b.song_id for b in split[0]}.isdisjoint({b.song_id for b in split[1]})


def test_loss_goes_down(bars):
    mc = small_model()
    tc = TrainConfig(variant="aug", steps=60, batch_size=8, learning_rate=3e-3, seed=0, validation_fraction=0.0)
    _, hist, _ = train(bars[:12], mc, tc)
    first = np.mean([r.total for r in hist[:10]])
    last = np.mean([r.total for r in hist[-10:]])
    assert last < first


def test_evaluate_reports_both_accuracies(bars):
    mc = small_model()
    params = init_params(mc, np.random.default_rng(0))
    res = evaluate(params, bars[:10], mc, TrainConfig(variant="dropout", batch_size=4))
    assert 0 <= res["mlm_acc"] <= 1 and 0 <= res["ntxent_acc"] <= 1
    res = evaluate(params, bars[:10], mc, TrainConfig(variant="bert", batch_size=4))
    assert math.isnan(res["ntxent_acc"])


@pytest.mark.parametrize("projection", [False, True])
def test_micro_batches_match_one_padded_batch(bars, projection):
    from dataclasses import replace

    from helpers import joint_loss

    mc = replace(small_model(), projection_head=projection)
    params = init_params(mc, np.random.default_rng(1))
    batch = build_pair_batch("aug", Corpus(bars), 0, 2, 10)
    tc = TrainConfig(variant="aug", alpha=0.1)
    report, grads = loss_and_grads(params, batch, mc, tc, 0, 2, dropout_on=False)
    ref_batch = ([v.input_ids for v in batch.view_a], [v.mlm_targets for v in batch.view_a], batch.view_b)
    loss, ref = joint_loss(params, mc, ref_batch, 1.0, tc.alpha, tau=tc.tau)
    assert abs(report.total - loss) < 1e-10
    for k in ref:
        np.testing.assert_allclose(grads[k], ref[k], rtol=1e-8, atol=1e-13)


@pytest.mark.slow
@pytest.mark.parametrize("variant", ["bert", "aug", "neighbor", "dropout"])
def test_loss_trends_down_in_every_window(variant):
    bars = synth_corpus(25, 2, seed=3)[0]
    mc = ModelConfig(num_layers=2, hidden_size=32, num_heads=2, ffn_size=64, max_seq_len=160)
    tc = TrainConfig(variant=variant, steps=300, batch_size=8, learning_rate=3e-3, validation_fraction=0.0)
    _, hist, _ = train(bars, mc, tc)
    total = np.array([r.total for r in hist])
    assert np.all(np.isfinite(total[:20]))
    for start in range(0, len(total) - 99, 50):
        slope = np.polyfit(np.arange(100), total[start : start + 100], 1)[0]
        assert slope < 0, (start, slope)
