"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 4-6 run the desk-scale MNIST subset (4000 train / 1000 test, 20
clients, alpha 0.1, 20% malicious, trimmed mean m=4, 60 rounds, seeds 0-2).
Runs are cached per session so criteria that share a configuration share the
run.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from hydrafl.aggregation import Defense, aggregate_mean, aggregate_trimmed_mean
from hydrafl.attacks import AttackConfig, AttackKind
from hydrafl.data import LabeledDataset, PartitionConfig, dirichlet_partition
from hydrafl.harness import MOON_ARCH, desk_config, load_datasets, run_experiment
from hydrafl.losses import DistillContext, LossKind, LossSpec, client_loss
from hydrafl.nn import ModelArch, ParameterVector, backward, forward, grad_check

from test_aggregation import brute_trimmed_mean

SEEDS = (0, 1, 2)
PP = 0.01  # one percentage point as a fraction

pytestmark = pytest.mark.acceptance


# 1 ---------------------------------------------------------------------------

def test_criterion_1_gradient_oracle(report):
    start = time.perf_counter()
    errors = {}
    for kind in LossKind:
        aux = (4,) if kind is LossKind.HYDRA_MOON else (5,)
        arch = ModelArch(8, (6, 4), 3, aux_tap_index=0, aux_hidden_dims=aux)
        rng = np.random.default_rng(42)
        params = ParameterVector(rng.standard_normal(arch.num_params()) * 0.5, arch.layout())
        x = rng.random((5, 8))
        y = rng.integers(0, 3, size=5)
        ctx = DistillContext(rng.standard_normal((5, 3)), rng.standard_normal((5, 4)),
                             rng.standard_normal((5, 4)), rng.standard_normal((5, 4)))
        spec = LossSpec(kind, beta=1.0, mu=1.0, b=2.0, gamma=1.5, tau=1.0)

        def closure(p, batch, arch=arch, spec=spec):
            trace = forward(arch, p, batch)
            res = client_loss(trace, ctx, y, spec)
            return res.loss, backward(arch, p, trace, **res.upstream())

        errors[kind.value] = grad_check(arch, params, closure, x, 1e-5)
    elapsed = time.perf_counter() - start
    worst = max(errors.values())
    ok = report("1", worst < 1e-4 and elapsed < 60,
                f"max grad-check relative error {worst:.2e} (< 1e-4) over {len(errors)} kinds "
                f"in {elapsed:.1f}s (< 60s)")
    assert ok, errors


# 2 ---------------------------------------------------------------------------

def test_criterion_2_aggregator_oracle(report):
    rng = np.random.default_rng(2024)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(3, 16))
        dim = int(rng.integers(1, 65))
        m = int(rng.integers(0, (n + 1) // 2))
        updates = list(rng.standard_normal((n, dim)) * 10.0 ** rng.integers(-3, 4))
        if aggregate_trimmed_mean(updates, m).tobytes() != brute_trimmed_mean(updates, m).tobytes():
            mismatches += 1
        if aggregate_trimmed_mean(updates, 0).tobytes() != aggregate_mean(updates).tobytes():
            mismatches += 1
    ok = report("2", mismatches == 0,
                f"{mismatches} bit-level mismatches vs sort-and-slice oracle / mean over 1000 cases")
    assert ok


# 3 ---------------------------------------------------------------------------

def _trajectory(config, datasets):
    res = run_experiment(config, write=False, datasets=datasets)
    rows = [(r.test_accuracy, r.mean_train_loss, r.mean_ce_term) for r in res.records]
    return res.final_params.values.tobytes(), rows


def test_criterion_3_reduction_identities(report, mnist):
    base = desk_config(federation=replace(desk_config().federation, rounds=5),
                       attack=AttackConfig(AttackKind.DYN_OPT))
    hydra = _trajectory(replace(base, loss=LossSpec(LossKind.HYDRA_NTD, beta=1.0, b=1.0, gamma=0.0)), mnist)
    ntd = _trajectory(replace(base, loss=LossSpec(LossKind.FEDNTD, beta=1.0)), mnist)
    ntd0 = _trajectory(replace(base, loss=LossSpec(LossKind.FEDNTD, beta=0.0)), mnist)
    ce = _trajectory(replace(base, loss=LossSpec(LossKind.CE)), mnist)
    ok_hydra, ok_ce = hydra == ntd, ntd0 == ce
    ok = report("3", ok_hydra and ok_ce,
                f"5-round seeded runs: HYDRA_NTD(gamma=0,b=1) == FedNTD bit-exact: {ok_hydra}; "
                f"FedNTD(beta=0) == CE bit-exact: {ok_ce}")
    assert ok


# 4-6: shared desk-scale runs ---------------------------------------------------

@pytest.fixture(scope="session")
def mnist():
    pytest.importorskip("mlxtend")
    return load_datasets(desk_config().dataset)


class RunCache:
    def __init__(self, datasets):
        self.datasets = datasets
        self.cache = {}
        self.seconds = {}

    def final(self, name, loss, attack, seed, **overrides):
        key = (name, attack, seed)
        if key not in self.cache:
            config = desk_config(loss=loss, attack=AttackConfig(attack), run_label=name, **overrides)
            start = time.process_time()
            res = run_experiment(config.with_seed(seed), write=False, datasets=self.datasets)
            self.seconds[key] = time.process_time() - start
            assert res.ok, res.summary.get("abort")
            self.cache[key] = res.final_accuracy
        return self.cache[key]

    def mean(self, name, loss, attack, **overrides):
        return float(np.mean([self.final(name, loss, attack, s, **overrides) for s in SEEDS]))


@pytest.fixture(scope="session")
def runs(mnist):
    return RunCache(mnist)


NTD_GRID = {
    0.0: LossSpec(LossKind.CE),  # FedNTD at beta=0 is CE bit for bit (criterion 3)
    0.3: LossSpec(LossKind.FEDNTD, beta=0.3),
    1.0: LossSpec(LossKind.FEDNTD, beta=1.0),
}
HYDRA_NTD = LossSpec(LossKind.HYDRA_NTD, beta=1.0, b=1.0, gamma=2.0)


@pytest.mark.slow
def test_criterion_4_attack_amplification(report, runs):
    benign, attacked = {}, {}
    for beta, loss in NTD_GRID.items():
        benign[beta] = runs.mean(f"ntd{beta:g}", loss, AttackKind.NONE)
        attacked[beta] = runs.mean(f"ntd{beta:g}", loss, AttackKind.DYN_OPT)
    cpu = sum(runs.seconds.values())
    betas = sorted(benign)
    steps = [benign[b1] - benign[b0] for b0, b1 in zip(betas, betas[1:])]
    ok_a = all(s >= -1.5 * PP for s in steps)
    drop = {b: benign[b] - attacked[b] for b in betas}
    ok_b = drop[1.0] - drop[0.0] >= 2 * PP
    ok_time = cpu <= 30 * 60
    detail = (
        "benign " + ", ".join(f"beta={b:g}: {100 * benign[b]:.2f}%" for b in betas)
        + " | steps " + ", ".join(f"{100 * s:+.2f}" for s in steps) + " pts (>= -1.5)"
        + " | drop " + ", ".join(f"beta={b:g}: {100 * drop[b]:.2f}" for b in betas)
        + f" pts, increase {100 * (drop[1.0] - drop[0.0]):.2f} (>= 2)"
        + f" | cpu {cpu / 60:.1f} min (<= 30)"
    )
    ok = report("4", ok_a and ok_b and ok_time, detail)
    assert ok


@pytest.mark.slow
def test_criterion_5_hydra_recovery(report, runs):
    ntd_benign = runs.mean("ntd1", NTD_GRID[1.0], AttackKind.NONE)
    ntd_attacked = runs.mean("ntd1", NTD_GRID[1.0], AttackKind.DYN_OPT)
    hydra_benign = runs.mean("hydra-ntd", HYDRA_NTD, AttackKind.NONE)
    hydra_attacked = runs.mean("hydra-ntd", HYDRA_NTD, AttackKind.DYN_OPT)
    gain = hydra_attacked - ntd_attacked
    gap = abs(hydra_benign - ntd_benign)
    ok = report("5", gain >= PP and gap <= 1.5 * PP,
                f"post-attack HYDRA_NTD {100 * hydra_attacked:.2f}% vs FedNTD {100 * ntd_attacked:.2f}% "
                f"(gain {100 * gain:+.2f} pts, >= 1) | benign {100 * hydra_benign:.2f}% vs "
                f"{100 * ntd_benign:.2f}% (gap {100 * gap:.2f}, <= 1.5)")
    assert ok


@pytest.mark.slow
def test_criterion_6_moon_variant(report, runs):
    moon = runs.mean("moon", LossSpec(LossKind.MOON, mu=1.0), AttackKind.STAT_OPT, arch=MOON_ARCH)
    hydra = runs.mean("hydra-moon", LossSpec(LossKind.HYDRA_MOON, mu=0.0, b=1.0, gamma=1.0),
                      AttackKind.STAT_OPT, arch=MOON_ARCH)
    gain = hydra - moon
    ok = report("6", gain >= PP,
                f"post-attack (Stat-Opt, TrMean) HYDRA_MOON {100 * hydra:.2f}% vs MOON {100 * moon:.2f}% "
                f"(gain {100 * gain:+.2f} pts, >= 1)")
    assert ok


# 7 ---------------------------------------------------------------------------

def test_criterion_7_affine_in_beta(report):
    worst_line, worst_slope = 0.0, 0.0
    for kind in (LossKind.FEDNTD, LossKind.HYDRA_NTD):
        arch = ModelArch(8, (6, 4), 3, aux_tap_index=0, aux_hidden_dims=(5,))
        rng = np.random.default_rng(7)
        params = ParameterVector(rng.standard_normal(arch.num_params()) * 0.5, arch.layout())
        x, y = rng.random((6, 8)), rng.integers(0, 3, size=6)
        ctx = DistillContext(server_logits=rng.standard_normal((6, 3)))
        trace = forward(arch, params, x)
        for b in (1.0, 4.0):
            res = [client_loss(trace, ctx, y, LossSpec(kind, beta=beta, b=b, gamma=2.0)) for beta in (0.0, 1.0, 2.0)]
            l0, l1, l2 = (r.loss for r in res)
            worst_line = max(worst_line, abs((l2 - l1) - (l1 - l0)))
            worst_slope = max(worst_slope, abs((l1 - l0) - res[1].kd_final / b))
    ok = report("7", worst_line < 1e-10 and worst_slope < 1e-10,
                f"collinearity residual {worst_line:.1e}, slope residual {worst_slope:.1e} (< 1e-10)")
    assert ok


# 8 ---------------------------------------------------------------------------

def test_criterion_8_determinism(report, mnist, tmp_path):
    config = desk_config(federation=replace(desk_config().federation, rounds=3),
                         loss=LossSpec(LossKind.HYDRA_MOON, mu=1.0, b=2.0, gamma=1.0), arch=MOON_ARCH,
                         attack=AttackConfig(AttackKind.DYN_OPT), output_dir=str(tmp_path), run_label="det")
    outputs = []
    for workers in (1, 1, 4):
        res = run_experiment(config, workers=workers, datasets=mnist)
        outputs.append((res.csv_path.read_bytes(), res.summary_path.read_bytes()))
    ok = report("8", outputs[0] == outputs[1] == outputs[2],
                "3-round attacked HYDRA_MOON run: CSV and summary bytes identical across reruns "
                "and 1 vs 4 workers")
    assert ok


# 9 ---------------------------------------------------------------------------

def _cover_ok(shards, dataset):
    idx = np.concatenate([s.example_indices for s in shards])
    unique = all(np.unique(s.example_indices).size == len(s) for s in shards)
    return unique and idx.size == len(dataset) and np.array_equal(np.sort(idx), np.arange(len(dataset)))


def test_criterion_9_partition(report, mnist):
    train, _ = mnist
    rng = np.random.default_rng(9)
    failures = 0
    for _ in range(200):
        alpha = float(10 ** rng.uniform(-2, 2))
        clients = int(rng.integers(1, 51))
        seed = int(rng.integers(0, 2**31))
        if not _cover_ok(dirichlet_partition(train, PartitionConfig(clients, alpha, seed)), train):
            failures += 1

    labels = np.repeat(np.arange(10), 1000)
    big = LabeledDataset(np.zeros((labels.size, 1)), labels, 10)
    uniform_ok, shares = True, []
    for seed in range(3):
        for s in dirichlet_partition(big, PartitionConfig(10, 1e6, seed)):
            counts = np.bincount(labels[s.example_indices], minlength=10)
            uniform_ok &= bool(np.all(np.abs(counts - 100) <= 25))
        shards = dirichlet_partition(big, PartitionConfig(10, 0.05, seed))
        counts = np.array([np.bincount(labels[s.example_indices], minlength=10) for s in shards])
        shares.append((counts.max(axis=0) / 1000).mean())
    concentrated = float(np.mean(shares))
    ok = report("9", failures == 0 and uniform_ok and min(shares) > 0.5,
                f"disjoint cover failures {failures}/200; alpha=1e6 within +-25% of uniform: {uniform_ok}; "
                f"alpha=0.05 mean max-client share {concentrated:.3f} (> 0.5)")
    assert ok
