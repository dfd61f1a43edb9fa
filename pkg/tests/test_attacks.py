from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hydrafl.aggregation import Defense, aggregate_mean, aggregate_trimmed_mean, make_agr
from hydrafl.attacks import (
    AttackConfig,
    AttackKind,
    DynOptDirection,
    StatOptForm,
    apply_attack,
    dyn_opt,
    dyn_opt_direction,
    stat_opt,
)
from hydrafl.errors import ConfigError, InputError


@dataclass(frozen=True)
class Upd:
    client_id: int
    delta: np.ndarray


def test_stat_opt_examples():
    # the benign mean is [1, -2, 0]
    benign = [np.array([1.0, -2.0, 0.0])]
    np.testing.assert_array_equal(stat_opt(benign, 1.0), [0.0, -1.0, 0.0])
    np.testing.assert_array_equal(stat_opt(benign, 1.0, StatOptForm.LITERAL), [1.0, -1.0, 0.0])
    with pytest.raises(ConfigError):
        stat_opt(benign, 0.0)
    with pytest.raises(InputError):
        stat_opt([], 1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100.0))
def test_stat_opt_moves_against_the_mean_by_gamma(seed, gamma):
    benign = list(np.random.default_rng(seed).standard_normal((5, 7)))
    mean = np.mean(benign, axis=0)
    poisoned = stat_opt(benign, gamma)
    np.testing.assert_allclose(poisoned - mean, -gamma * np.sign(mean), atol=1e-12 * max(1, gamma))


def test_directions():
    benign = [np.array([3.0, -4.0]), np.array([3.0, -4.0])]
    np.testing.assert_allclose(dyn_opt_direction(benign, DynOptDirection.UNIT_MEAN), [-0.6, 0.8])
    np.testing.assert_array_equal(dyn_opt_direction(benign, DynOptDirection.SIGN_OF_MEAN), [-1, 1])
    np.testing.assert_array_equal(dyn_opt_direction(benign, DynOptDirection.STD), [0, 0])
    assert not dyn_opt_direction([np.zeros(3)]).any()


def test_dyn_opt_under_plain_mean_returns_largest_probe():
    benign = list(np.random.default_rng(0).standard_normal((6, 4)))
    res = dyn_opt(benign, aggregate_mean, AttackConfig(AttackKind.DYN_OPT, gamma_init=2.0), 2)
    assert res.gamma == max(g for g, _ in res.probes)
    assert res.gamma > 2.0
    devs = sorted(res.probes)
    assert all(a[1] <= b[1] for a, b in zip(devs, devs[1:]))


def test_dyn_opt_matches_grid_oracle_under_trimmed_mean():
    rng = np.random.default_rng(1)
    benign = [np.array([1.0 + 0.05 * v]) for v in rng.standard_normal(8)]
    agr = make_agr("TRMEAN", 2)
    w = np.array([-1.0])
    config = AttackConfig(AttackKind.DYN_OPT, gamma_init=1.0, gamma_search_iters=30, gamma_threshold=1e-4)
    res = dyn_opt(benign, agr, config, num_malicious=2, direction=w)

    reference = agr(benign)
    mean = np.mean(benign, axis=0)
    grid = [float(np.linalg.norm(agr([mean + 0.1 * i * w] * 2 + benign) - reference)) for i in range(51)]
    step = max(abs(a - b) for a, b in zip(grid, grid[1:]))
    assert res.deviation >= max(grid) - step
    assert res.deviation >= next(d for g, d in res.probes if g == 1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(list(DynOptDirection)), st.floats(0.1, 20.0))
def test_dyn_opt_dominates_its_own_probes(seed, direction, gamma_init):
    rng = np.random.default_rng(seed)
    benign = list(rng.standard_normal((7, 5)))
    config = AttackConfig(AttackKind.DYN_OPT, gamma_init=gamma_init, dyn_opt_direction=direction)
    res = dyn_opt(benign, make_agr("TRMEAN", 2), config, num_malicious=2)
    assert res.deviation >= max(d for _, d in res.probes)
    assert res.probes[0][0] == 0.0 and res.probes[1][0] == gamma_init
    assert len(res.probes) <= config.gamma_search_iters + 1
    np.testing.assert_allclose(
        res.update, np.mean(benign, axis=0) + res.gamma * dyn_opt_direction(benign, direction))


def test_dyn_opt_zero_direction_returns_the_mean():
    benign = list(np.random.default_rng(2).standard_normal((5, 3)))
    res = dyn_opt(benign, aggregate_mean, AttackConfig(AttackKind.DYN_OPT), 1, direction=np.zeros(3))
    np.testing.assert_allclose(res.update, np.mean(benign, axis=0))
    assert res.deviation < 1e-12


def test_malicious_ids():
    cfg = AttackConfig(AttackKind.STAT_OPT)
    assert cfg.malicious_ids(20) == frozenset(range(4))
    assert cfg.malicious_ids(10) == frozenset({0, 1})
    assert cfg.malicious_ids(7) == frozenset({0, 1})
    assert AttackConfig(malicious_fraction=0.0).malicious_ids(10) == frozenset()
    with pytest.raises(ConfigError):
        AttackConfig(malicious_fraction=0.5)


def test_apply_attack_replicates_and_leaves_benign_untouched():
    rng = np.random.default_rng(3)
    updates = [Upd(i, rng.standard_normal(4)) for i in range(10)]
    before = [u.delta.copy() for u in updates]
    out = apply_attack(updates, {0, 1}, AttackConfig(AttackKind.STAT_OPT), aggregate_mean)
    assert [u.client_id for u in out] == list(range(10))
    np.testing.assert_array_equal(out[0].delta, out[1].delta)
    assert not np.array_equal(out[0].delta, before[0])
    for i in range(2, 10):
        assert out[i] is updates[i]
        assert out[i].delta.tobytes() == before[i].tobytes()


def test_apply_attack_noops():
    updates = [Upd(i, np.full(2, float(i))) for i in range(4)]
    assert apply_attack(updates, set(), AttackConfig(AttackKind.DYN_OPT), aggregate_mean) == updates
    assert apply_attack(updates, {0}, AttackConfig(AttackKind.NONE), aggregate_mean) == updates


def test_apply_attack_uses_reference_when_no_benign_sampled():
    updates = [Upd(0, np.zeros(2)), Upd(1, np.zeros(2))]
    reference = [Upd(0, np.array([1.0, -1.0]))]
    out = apply_attack(updates, {0, 1}, AttackConfig(AttackKind.STAT_OPT, gamma_init=1.0),
                       aggregate_mean, reference)
    np.testing.assert_array_equal(out[0].delta, [0.0, 0.0])
    with pytest.raises(InputError):
        apply_attack(updates, {0, 1}, AttackConfig(AttackKind.STAT_OPT), aggregate_mean)


def test_dyn_opt_trimmed_attack_hurts_more_than_nothing():
    rng = np.random.default_rng(4)
    benign = list(1.0 + 0.1 * rng.standard_normal((8, 6)))
    agr = make_agr("TRMEAN", 2)
    res = dyn_opt(benign, agr, AttackConfig(AttackKind.DYN_OPT), num_malicious=2)
    assert res.deviation > 0
    shifted = aggregate_trimmed_mean([res.update] * 2 + benign, 2)
    assert np.linalg.norm(shifted - agr(benign)) == pytest.approx(res.deviation)


def test_dyn_opt_with_benign_set_smaller_than_trim_bound():
    rng = np.random.default_rng(3)
    benign = [rng.normal(size=6) for _ in range(8)]
    agr = make_agr(Defense.TRMEAN, 4, clamp=True)
    res = dyn_opt(benign, agr, AttackConfig(AttackKind.DYN_OPT, 0.2), num_malicious=2)
    assert np.all(np.isfinite(res.update))
    assert res.deviation >= res.probes[0][1]
