import os

import numpy as np
import pytest

from helpers import random_dataset
from tdsgl.data import InteractionDataset, split_dataset
from tdsgl.encoder import init_state, load_checkpoint
from tdsgl.evaluator import evaluate
from tdsgl.trainer import (
    Hyperparameters,
    TrainingDiverged,
    adam_step,
    build_training_graph,
    final_embeddings,
    sample_epoch_batches,
    train,
)


def test_batch_arithmetic():
    pairs = [(u, i) for u in range(100) for i in range(100)]
    ds = InteractionDataset(100, 101, train=pairs)
    batches = sample_epoch_batches(ds, 2048, np.random.default_rng(0))
    # 10,000 = 4 * 2048 + 1808
    assert [len(b) for b in batches] == [2048] * 4 + [1808]
    seen = np.concatenate([np.column_stack([b.users, b.pos]) for b in batches])
    assert sorted(map(tuple, seen.tolist())) == pairs
    assert all((b.neg == 100).all() for b in batches)


def test_batches_are_deterministic_and_negatives_unobserved(rng):
    ds = random_dataset(rng, 30, 40)
    a = sample_epoch_batches(ds, 64, np.random.default_rng(5))
    b = sample_epoch_batches(ds, 64, np.random.default_rng(5))
    observed = set(map(tuple, ds.train.tolist()))
    for x, y in zip(a, b):
        assert np.array_equal(x.users, y.users) and np.array_equal(x.neg, y.neg)
        assert not any((u, j) in observed for u, j in zip(x.users.tolist(), x.neg.tolist()))


def test_forced_negative_and_full_user_error(toy_dataset):
    ds = InteractionDataset(1, 3, train=[(0, 0), (0, 1)])
    for seed in range(10):
        for b in sample_epoch_batches(ds, 1, np.random.default_rng(seed)):
            assert b.neg.tolist() == [2]
    full = InteractionDataset(1, 2, train=[(0, 0), (0, 1)])
    with pytest.raises(ValueError, match="every item"):
        sample_epoch_batches(full, 4, np.random.default_rng(0))
    with pytest.raises(ValueError):
        sample_epoch_batches(InteractionDataset(1, 2, train=[]), 4, np.random.default_rng(0))


def test_adam_first_step_is_signed_lr(rng):
    state = init_state(2, 3, 4, rng)
    before = state.x0.copy()
    grad = rng.normal(size=before.shape)
    adam_step(state, grad, 0.01)
    np.testing.assert_allclose(state.x0 - before, -0.01 * np.sign(grad), rtol=1e-6)


def test_adam_zero_gradient(rng):
    state = init_state(2, 3, 4, rng)
    before = state.x0.copy()
    adam_step(state, np.zeros_like(before), 0.01)
    assert np.array_equal(state.x0, before) and state.step == 1
    grad = np.zeros_like(before)
    grad[1] = 1.0
    adam_step(state, grad, 0.01)
    assert np.array_equal(np.delete(state.x0, 1, 0), np.delete(before, 1, 0))
    assert state.step == 2


def test_adam_minimizes_square():
    state = init_state(1, 0, 1, 0)
    state.x0[:] = 1.0
    trace = []
    for _ in range(10):
        adam_step(state, 2 * state.x0, 0.1)
        trace.append(abs(float(state.x0[0, 0])))
    assert all(b < a for a, b in zip([1.0] + trace, trace))


def test_adam_rejects_non_finite(rng):
    state = init_state(1, 1, 2, rng)
    grad = np.zeros((2, 2))
    grad[1, 0] = np.nan
    with pytest.raises(FloatingPointError, match="x0"):
        adam_step(state, grad, 0.1)


@pytest.mark.parametrize("seed", range(5))
def test_plain_toy_loss_decreases(seed):
    # every user misses exactly one item, so negatives are forced and the loss is deterministic
    ds = InteractionDataset(3, 3, train=[(0, 0), (0, 1), (1, 0), (1, 2), (2, 1), (2, 2)])
    hyper = Hyperparameters(ssl_lambda=0.0, mu=0.0, layers=0, dim=8, epochs=20, patience=100, seed=seed)
    losses = [r.rec_loss for r in train(ds, hyper).history]
    assert len(losses) == 20
    assert all(b < a for a, b in zip(losses, losses[1:]))


def _small_split(seed=0):
    rng = np.random.default_rng(seed)
    return split_dataset(random_dataset(rng, 40, 30, 0.25), seed=seed)


def test_two_epoch_traces_are_reproducible(tmp_path):
    ds = _small_split()
    hyper = Hyperparameters(dim=8, layers=2, beta=2, batch=32, epochs=2, seed=3)
    for name in ("a", "b"):
        train(ds, hyper, run_dir=str(tmp_path / name))
    for fname in ("steps.csv", "checkpoint.bin"):
        assert (tmp_path / "a" / fname).read_bytes() == (tmp_path / "b" / fname).read_bytes()
    rows = [(tmp_path / n / "metrics.csv").read_text().splitlines() for n in ("a", "b")]
    # wall-clock seconds are the only column allowed to differ
    assert [r.rsplit(",", 1)[0] for r in rows[0]] == [r.rsplit(",", 1)[0] for r in rows[1]]
    assert rows[0][0] == "epoch,rec_loss,ssl_loss,val_recall@20,val_ndcg@20,seconds"
    assert len(rows[0]) == 3


def test_identical_seeds_give_identical_states():
    ds = _small_split(1)
    hyper = Hyperparameters(dim=6, layers=2, beta=2, batch=16, epochs=3, fe_kind="nl+w", aug_kind="rw")
    a, b = train(ds, hyper), train(ds, hyper)
    assert a.final_state.equals(b.final_state)
    c = train(ds, hyper.replace(seed=hyper.seed + 1))
    assert not a.final_state.equals(c.final_state)


def test_best_checkpoint_is_never_worse(tmp_path):
    ds = _small_split(2)
    hyper = Hyperparameters(dim=8, layers=1, beta=2, batch=32, epochs=12, patience=100, lr=0.02)
    result = train(ds, hyper, run_dir=str(tmp_path))
    vals = [r.val_recall for r in result.history]
    assert result.best_val == max(vals)
    assert all(result.best_val >= v for v in vals[result.best_epoch:])
    saved = load_checkpoint(str(tmp_path / "checkpoint.bin"))
    assert saved.equals(result.best_state)
    graph = build_training_graph(ds, hyper)
    report = evaluate(final_embeddings(saved, graph.norm_adj, 1), ds.num_users, ds.validation, ds.train, 20)
    assert report.recall == result.best_val


def test_early_stopping_patience():
    ds = _small_split(3)
    hyper = Hyperparameters(dim=4, layers=1, beta=2, batch=64, epochs=200, patience=2, lr=1e-6)
    result = train(ds, hyper)
    assert result.stopped_early
    assert len(result.history) == result.best_epoch + 2


def test_divergence_aborts_with_last_good_state(tmp_path):
    ds = _small_split(4)
    hyper = Hyperparameters(dim=4, layers=1, beta=2, batch=16, epochs=5, lr=1e300, init_std=1e150)
    with pytest.raises(TrainingDiverged) as info, np.errstate(all="ignore"):
        train(ds, hyper, run_dir=str(tmp_path))
    assert info.value.best_state is not None
    assert info.value.checkpoint_path == os.path.join(str(tmp_path), "checkpoint.bin")


def test_hyperparameter_validation():
    for bad in (dict(tau=0), dict(beta=0), dict(rho=1.0), dict(ssl_lambda=-1), dict(fe_kind="mlp"), dict(aug_kind="x")):
        with pytest.raises(ValueError):
            Hyperparameters(**bad)
    assert Hyperparameters().to_dict()["batch"] == 2048
