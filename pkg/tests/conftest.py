from dataclasses import replace

import pytest

from hydrafl.aggregation import Defense
from hydrafl.data import PartitionConfig
from hydrafl.federation import FederationConfig
from hydrafl.harness import DatasetConfig, DatasetKind, DefenseConfig, ExperimentConfig
from hydrafl.losses import LossKind, LossSpec
from hydrafl.nn import ModelArch, OptimizerState


def make_synth_config(out_dir, rounds=3, **overrides) -> ExperimentConfig:
    base = ExperimentConfig(
        dataset=DatasetConfig(kind=DatasetKind.SYNTH, num_classes=4, input_dim=8,
                              per_class=40, test_per_class=10, spread=0.15),
        partition=PartitionConfig(5, 0.5, 0),
        federation=FederationConfig(5, 1.0, 1, 1.0, rounds, 16, OptimizerState(0.1, 0.9, 1e-5), 0),
        arch=ModelArch(8, (12, 10), 4, aux_tap_index=0, aux_hidden_dims=(10,)),
        loss=LossSpec(LossKind.FEDNTD, beta=1.0),
        defense=DefenseConfig(Defense.TRMEAN, 1),
        output_dir=str(out_dir),
        run_label="synth",
    )
    return replace(base, **overrides)


@pytest.fixture
def synth_config(tmp_path):
    return make_synth_config(tmp_path)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report():
    """Record one pass/fail line for the acceptance summary."""
    def record(criterion: str, ok: bool, detail: str) -> bool:
        ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  criterion {criterion}: {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
