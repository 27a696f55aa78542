import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lapp import numerics as nx
from lapp.preference_model import PredictorConfig, PreferenceTriple, RewardPredictor, TrajectorySegment
from lapp.trainer import (
    EnsemblePredictor,
    TrainerConfig,
    TrainingError,
    ensemble_predict,
    run_early_stopping,
    select_and_ensemble,
    select_indices,
    should_stop,
    split_dataset,
    train_ensemble,
)


def stub_losses(train, val):
    """epoch_fn replaying fixed loss sequences."""
    return lambda m: (train[m], val[m])


def test_early_stop_fires_exactly_when_both_conditions_hold():
    # val > alpha * train from epoch 2 on, but the minimum is 4 -> first allowed stop is epoch 5
    train = [1.0] * 10
    val = [1.0, 1.2, 1.4, 1.5, 1.5, 1.5, 1.5, 1.5, 1.5, 1.5]
    stop, val_loss, hist = run_early_stopping(stub_losses(train, val), min_epochs=4, max_epochs=10, alpha=1.3)
    assert stop == 5 and val_loss == 1.5 and len(hist) == 6


def test_early_stop_boundary_is_strict():
    # equality with alpha * train never triggers; epoch == min_epochs never triggers
    assert not should_stop(10, 1.0, 1.3, 1.3, 5)
    assert not should_stop(5, 1.0, 2.0, 1.3, 5)
    assert should_stop(6, 1.0, 1.31, 1.3, 5)


def test_early_stop_runs_to_max_without_trigger():
    stop, val_loss, hist = run_early_stopping(stub_losses([1.0] * 7, [1.0] * 7), 2, 7, 1.3)
    assert stop == 6 and len(hist) == 7


def test_early_stop_rejects_non_finite_loss():
    with pytest.raises(TrainingError):
        run_early_stopping(stub_losses([1.0, np.nan], [1.0, 1.0]), 0, 2, 1.3)


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.floats(0.1, 5.0), min_size=20, max_size=20),
    st.lists(st.floats(0.1, 5.0), min_size=20, max_size=20),
    st.integers(0, 19),
)
def test_early_stop_matches_rule(train, val, min_epochs):
    stop, _, hist = run_early_stopping(stub_losses(train, val), min_epochs, 20, 1.3)
    expected = next((m for m in range(20) if val[m] > 1.3 * train[m] and m > min_epochs), 19)
    assert stop == expected and len(hist) == stop + 1


def test_select_indices_with_ties():
    assert select_indices([0.5, 0.2, 0.2, 0.9, 0.1], 3) == [4, 1, 2]
    assert select_indices([1.0, 1.0, 1.0], 2) == [0, 1]
    with pytest.raises(ValueError):
        select_indices([1.0], 2)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from([0.1, 0.2, 0.3, 0.4]), min_size=3, max_size=12), st.integers(1, 3))
def test_select_returns_smallest(losses, count):
    idx = select_indices(losses, count)
    assert sorted(losses[i] for i in idx) == sorted(losses)[:count]
    chosen = set(idx)
    for i in idx:
        # no skipped index with the same loss comes earlier
        assert all(j in chosen for j in range(i) if losses[j] == losses[i])


def test_split_sizes():
    data = list(range(25))
    train, val = split_dataset(data, np.random.default_rng(0))
    assert len(val) == 3 and len(train) == 22 and sorted(train + val) == data
    with pytest.raises(ValueError):
        split_dataset(list(range(9)), np.random.default_rng(0))


def make_model(seed, scale=0.3):
    cfg = PredictorConfig(width=16, heads=2, blocks=1, channels=["x"])
    m = RewardPredictor(cfg, 1, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for p in m.parameters():
        p.data = rng.normal(0.0, scale, size=p.data.shape)
    return m


def test_ensemble_output_is_member_mean():
    members = [make_model(s) for s in range(3)]
    ens = EnsemblePredictor(members, [0.1, 0.2, 0.3])
    feats = np.random.default_rng(0).normal(size=(4, 10, 1))
    with nx.no_grad():
        expected = np.mean([m.step_rewards(feats).data for m in members], axis=0)
        np.testing.assert_allclose(ens.step_rewards(feats).data, expected, atol=1e-12)


def test_select_and_ensemble_keeps_lowest_members():
    members = [make_model(s) for s in range(4)]
    ens = select_and_ensemble(members, [0.4, 0.1, 0.3, 0.2], 2)
    assert ens.indices == [1, 3]
    assert ens.members[0] is members[1] and ens.members[1] is members[3]


def test_ensemble_rejects_mixed_configs():
    a = make_model(0)
    cfg = PredictorConfig(width=8, heads=2, blocks=1, channels=["x"])
    with pytest.raises(ValueError):
        EnsemblePredictor([a, RewardPredictor(cfg, 1)], [0.1, 0.2])


def linear_triples(n, rng, noise=0.0):
    triples = []
    for _ in range(n):
        xa, xb = rng.normal(size=(6, 1)), rng.normal(size=(6, 1))
        ra, rb = xa.sum(), xb.sum()
        y = 0.0 if ra > rb else 1.0
        if rng.random() < noise:
            y = float(rng.integers(0, 2))
        triples.append(
            PreferenceTriple(TrajectorySegment({"x": xa}, np.zeros((6, 1))), TrajectorySegment({"x": xb}, np.zeros((6, 1))), y)
        )
    return triples


def test_train_ensemble_learns_and_is_deterministic():
    rng = np.random.default_rng(0)
    data = linear_triples(120, rng)
    pcfg = PredictorConfig(mode="markovian", width=8, heads=2, blocks=1, channels=["x"])
    tcfg = TrainerConfig(pool_size=3, select=2, min_epochs=20, max_epochs=40, lr=3e-3)
    res = train_ensemble(data, pcfg, tcfg, seed=1)
    again = train_ensemble(data, pcfg, tcfg, seed=1)
    assert res.member_losses == again.member_losses
    assert len(res.ensemble.members) == 2
    assert sorted(res.member_losses)[:2] == res.ensemble.val_losses
    test = linear_triples(100, np.random.default_rng(5))
    correct = [
        (ensemble_predict(res.ensemble, t.segment_a).sum() > ensemble_predict(res.ensemble, t.segment_b).sum())
        == (t.label == 0.0)
        for t in test
    ]
    assert np.mean(correct) > 0.85
    rows = res.curves
    assert {r[0] for r in rows} == {0, 1, 2}


def test_trainer_config_validation():
    with pytest.raises(ValueError):
        TrainerConfig(pool_size=2, select=3)
    with pytest.raises(ValueError):
        TrainerConfig(alpha=1.0)
    with pytest.raises(ValueError):
        TrainerConfig(min_epochs=10, max_epochs=5)


def test_ensemble_state_round_trip():
    members = [make_model(s) for s in range(2)]
    ens = EnsemblePredictor(members, [0.1, 0.2], [3, 1])
    arrays = ens.state_arrays("e/")
    back = EnsemblePredictor.from_state_arrays(arrays, members[0].config, 1, 2, "e/")
    feats = np.random.default_rng(0).normal(size=(2, 5, 1))
    with nx.no_grad():
        np.testing.assert_array_equal(back.step_rewards(feats).data, ens.step_rewards(feats).data)
    assert back.indices == [3, 1] and back.val_losses == [0.1, 0.2]
