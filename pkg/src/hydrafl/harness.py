"""Experiment configuration, runs, sweeps, persistence and presets.

A run writes two files to ``output_dir``:

* ``<run_label>.csv``: one row per round, columns exactly
  :meth:`MetricsRecord.columns` in declared order.
* ``<run_label>.json``: run label, resolved config, its content hash, status,
  initial and final accuracy (final = mean of the last 5 rounds) as fractions
  and as percentages.

Nothing in either file depends on the clock unless ``record_wall_time`` is on,
so reruns of one config produce identical bytes.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .aggregation import Defense
from .attacks import AttackConfig, AttackKind
from .data import (
    LabeledDataset,
    PartitionConfig,
    dirichlet_partition,
    load_idx,
    synth_gaussian_mixture,
)
from .errors import ConfigError, NumericError
from .federation import FederationConfig, RoundState, Simulation, initial_state, run_round
from .losses import LossKind, LossSpec
from .metrics import MetricsRecord, accuracy_drop, evaluate
from .nn import ModelArch, OptimizerState, ParameterVector, forward, init_params

log = logging.getLogger(__name__)

FINAL_WINDOW = 5
DEFAULT_MNIST_DIR = "data/mnist5k"


class DatasetKind(str, Enum):
    MNIST_IDX = "MNIST_IDX"
    SYNTH = "SYNTH"


@dataclass(frozen=True)
class DatasetConfig:
    kind: DatasetKind = DatasetKind.MNIST_IDX
    train_images: str = f"{DEFAULT_MNIST_DIR}/train-images-idx3-ubyte.gz"
    train_labels: str = f"{DEFAULT_MNIST_DIR}/train-labels-idx1-ubyte.gz"
    test_images: str = f"{DEFAULT_MNIST_DIR}/t10k-images-idx3-ubyte.gz"
    test_labels: str = f"{DEFAULT_MNIST_DIR}/t10k-labels-idx1-ubyte.gz"
    # write the bundled 4000/1000 subset when the files are missing
    auto_export: bool = True
    train_limit: Optional[int] = None
    test_limit: Optional[int] = None
    num_classes: int = 10
    input_dim: int = 16
    per_class: int = 200
    test_per_class: int = 50
    spread: float = 0.1
    synth_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", DatasetKind(self.kind))
        for name in ("train_limit", "test_limit"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise ConfigError(f"{name} must be positive when set")


@dataclass(frozen=True)
class DefenseConfig:
    kind: Defense = Defense.TRMEAN
    m: int = 4

    def __post_init__(self):
        object.__setattr__(self, "kind", Defense(self.kind))
        if self.m < 0:
            raise ConfigError("trim count m must be non-negative")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    arch: ModelArch = field(default_factory=ModelArch)
    loss: LossSpec = field(default_factory=lambda: LossSpec(LossKind.CE))
    attack: AttackConfig = field(default_factory=AttackConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    output_dir: str = "runs"
    run_label: str = "run"
    record_wall_time: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        fed, part = self.federation, self.partition
        if part.num_clients != fed.total_clients:
            raise ConfigError("partition.num_clients must equal federation.total_clients")
        if self.defense.kind is Defense.TRMEAN and fed.clients_per_round <= 2 * self.defense.m:
            raise ConfigError(f"trimmed mean with m={self.defense.m} needs more than "
                              f"{2 * self.defense.m} clients per round, got {fed.clients_per_round}")
        if self.loss.kind.uses_aux and not self.arch.has_aux:
            raise ConfigError(f"{self.loss.kind.value} needs an auxiliary head (arch.aux_tap_index)")
        if (self.loss.kind is LossKind.HYDRA_MOON
                and self.arch.aux_representation_dim != self.arch.representation_dim):
            raise ConfigError("HYDRA_MOON needs the last aux hidden width to equal the last trunk width")
        if self.dataset.kind is DatasetKind.SYNTH and (
                self.arch.input_dim != self.dataset.input_dim
                or self.arch.num_classes != self.dataset.num_classes):
            raise ConfigError("arch input_dim/num_classes must match the synthetic dataset")
        if not self.run_label or any(c in self.run_label for c in "/\\"):
            raise ConfigError(f"run_label {self.run_label!r} must be a plain file stem")

    @property
    def seed(self) -> int:
        return self.federation.seed

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """One seed drives the partition, the initial model and client training."""
        return replace(self, partition=replace(self.partition, seed=seed),
                       federation=replace(self.federation, seed=seed))

    def to_dict(self) -> dict:
        return {
            "dataset": _plain(self.dataset),
            "partition": _plain(self.partition),
            "federation": self.federation.to_dict(),
            "arch": _plain(self.arch),
            "loss": _plain(self.loss),
            "attack": self.attack.to_dict(),
            "defense": _plain(self.defense),
            "output_dir": self.output_dir,
            "run_label": self.run_label,
            "record_wall_time": self.record_wall_time,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        _reject_unknown(cls, data, "config")
        kwargs = {}
        for name, typ in (("dataset", DatasetConfig), ("partition", PartitionConfig),
                          ("arch", ModelArch), ("loss", LossSpec), ("attack", AttackConfig),
                          ("defense", DefenseConfig)):
            if name in data:
                kwargs[name] = _build(typ, data.pop(name), name)
        if "federation" in data:
            fed = dict(data.pop("federation"))
            _reject_unknown(FederationConfig, fed, "federation")
            if "optimizer" in fed:
                fed["optimizer"] = _build(OptimizerState, fed["optimizer"], "federation.optimizer")
            kwargs["federation"] = _build(FederationConfig, fed, "federation")
        kwargs.update(data)
        return cls(**kwargs)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc


def _plain(obj) -> dict:
    out = {}
    for f in fields(obj):
        value = getattr(obj, f.name)
        if isinstance(value, Enum):
            value = value.value
        elif isinstance(value, tuple):
            value = list(value)
        out[f.name] = value
    return out


def _reject_unknown(typ, data: dict, where: str) -> None:
    unknown = set(data) - {f.name for f in fields(typ)}
    if unknown:
        raise ConfigError(f"unknown {where} field(s): {', '.join(sorted(unknown))}")


def _build(typ, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a JSON object")
    _reject_unknown(typ, data, where)
    try:
        return typ(**data)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_hash(config: ExperimentConfig) -> str:
    """Git blob hash of the canonical (sorted, compact) config JSON."""
    payload = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha1(b"blob %d\0" % len(payload) + payload).hexdigest()


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror}") from exc
    return ExperimentConfig.from_json(text)


# datasets

def load_datasets(cfg: DatasetConfig) -> tuple[LabeledDataset, LabeledDataset]:
    if cfg.kind is DatasetKind.SYNTH:
        full = synth_gaussian_mixture(cfg.num_classes, cfg.input_dim,
                                      cfg.per_class + cfg.test_per_class, cfg.spread, cfg.synth_seed)
        block = cfg.per_class + cfg.test_per_class
        pos = np.arange(len(full)) % block
        train = full.subset(np.flatnonzero(pos < cfg.per_class))
        test = full.subset(np.flatnonzero(pos >= cfg.per_class))
    else:
        paths = [Path(p) for p in (cfg.train_images, cfg.train_labels, cfg.test_images, cfg.test_labels)]
        if cfg.auto_export and not all(p.exists() for p in paths):
            from .mnist_subset import FILES, export

            defaults = [Path(DEFAULT_MNIST_DIR) / FILES[k] for k in
                        ("train_images", "train_labels", "test_images", "test_labels")]
            if [p.name for p in paths] == [p.name for p in defaults] and len({p.parent for p in paths}) == 1:
                log.info("exporting the MNIST subset to %s", paths[0].parent)
                try:
                    export(paths[0].parent)
                except RuntimeError as exc:
                    raise ConfigError(str(exc)) from exc
        for p in paths:
            if not p.exists():
                raise FileNotFoundError(f"dataset file not found: {p}")
        train = load_idx(paths[0], paths[1], cfg.num_classes)
        test = load_idx(paths[2], paths[3], cfg.num_classes)
    if cfg.train_limit is not None:
        train = train.subset(np.arange(min(cfg.train_limit, len(train))))
    if cfg.test_limit is not None:
        test = test.subset(np.arange(min(cfg.test_limit, len(test))))
    return train, test


def build_simulation(config: ExperimentConfig, workers: int = 1,
                     datasets: Optional[tuple[LabeledDataset, LabeledDataset]] = None
                     ) -> tuple[Simulation, ParameterVector]:
    train, test = datasets if datasets is not None else load_datasets(config.dataset)
    if train.input_dim != config.arch.input_dim or train.num_classes != config.arch.num_classes:
        raise ConfigError(f"dataset is {train.input_dim}-dim/{train.num_classes} classes, arch expects "
                          f"{config.arch.input_dim}/{config.arch.num_classes}")
    shards = dirichlet_partition(train, config.partition)
    sim = Simulation(config.arch, config.loss, config.federation, train, shards, test,
                     config.attack, config.defense.kind, config.defense.m, workers,
                     config.record_wall_time)
    return sim, init_params(config.arch, config.seed)


# single runs

@dataclass
class ExperimentResult:
    config: ExperimentConfig
    records: list[MetricsRecord]
    summary: dict
    final_params: ParameterVector
    csv_path: Optional[Path] = None
    summary_path: Optional[Path] = None

    @property
    def final_accuracy(self) -> float:
        return self.summary["final_accuracy"]

    @property
    def ok(self) -> bool:
        return self.summary["status"] == "ok"


def final_accuracy(records: Sequence[MetricsRecord], initial: float) -> float:
    if not records:
        return initial
    return float(np.mean([r.test_accuracy for r in records[-FINAL_WINDOW:]]))


def pct(x: float) -> float:
    return round(100.0 * x, 2)


def write_metrics_csv(records: Sequence[MetricsRecord], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MetricsRecord.columns())
        for r in records:
            writer.writerow([str(v).lower() if isinstance(v, bool) else repr(v) for v in r.as_row()])
    return path


def read_metrics_csv(path: str | Path) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != MetricsRecord.columns():
            raise ConfigError(f"{path}: unexpected metrics columns {header}")
        out = []
        for row in reader:
            values = dict(zip(header, row))
            out.append(MetricsRecord(
                int(values["round"]), float(values["test_accuracy"]), float(values["mean_train_loss"]),
                float(values["mean_ce_term"]), float(values["mean_kd_final_term"]),
                float(values["mean_kd_aux_term"]), values["attacked"] == "true",
                float(values["wall_time_ms"])))
    return out


def _write_json(obj: dict, path: Path) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def run_experiment(config: ExperimentConfig, workers: int = 1, write: bool = True,
                   datasets: Optional[tuple[LabeledDataset, LabeledDataset]] = None) -> ExperimentResult:
    """Run all rounds of one config; persist CSV and JSON summary when ``write``.

    A numeric failure stops the run: the rounds completed so far are kept and
    the summary records ``status = "numeric_abort"`` with the failing round.
    """
    sim, params = build_simulation(config, workers, datasets)
    state: RoundState = initial_state(config.arch, params)
    initial_acc = evaluate(config.arch, params, sim.test)
    abort = None
    for _ in range(config.federation.rounds):
        try:
            state = run_round(state, sim)
        except NumericError as exc:
            abort = {"round": state.round_index + 1, "message": str(exc)}
            log.error("%s: numeric abort in round %d: %s", config.run_label, abort["round"], exc)
            break
    records = state.metrics
    final = final_accuracy(records, initial_acc)
    summary = {
        "run_label": config.run_label,
        "config": config.to_dict(),
        "config_hash": config_hash(config),
        "status": "ok" if abort is None else "numeric_abort",
        "rounds_completed": len(records),
        "initial_accuracy": initial_acc,
        "initial_accuracy_pct": pct(initial_acc),
        "final_accuracy": final,
        "final_accuracy_pct": pct(final),
        "final_window": min(FINAL_WINDOW, len(records)),
        "malicious_clients": sorted(sim.malicious_ids),
    }
    if abort is not None:
        summary["abort"] = abort
    result = ExperimentResult(config, records, summary, state.global_params)
    if write:
        out = _output_dir(config)
        result.csv_path = write_metrics_csv(records, out / f"{config.run_label}.csv")
        result.summary_path = _write_json(summary, out / f"{config.run_label}.json")
    return result


def _output_dir(config: ExperimentConfig) -> Path:
    out = Path(config.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc.strerror}") from exc
    return out


# paired benign / attacked runs

def paired_configs(config: ExperimentConfig) -> tuple[ExperimentConfig, ExperimentConfig]:
    """Benign and attacked twins that differ only in ``attack.kind`` (and label)."""
    if config.attack.kind is AttackKind.NONE:
        raise ConfigError("a paired run needs an attack kind other than NONE")
    benign = replace(config, attack=replace(config.attack, kind=AttackKind.NONE),
                     run_label=f"{config.run_label}-benign")
    attacked = replace(config, run_label=f"{config.run_label}-attacked")
    return benign, attacked


def pair_summary(label: str, benign: ExperimentResult, attacked: ExperimentResult) -> dict:
    b, a = benign.final_accuracy, attacked.final_accuracy
    drop = accuracy_drop(b, a)
    return {
        "run_label": label,
        "benign": b, "attacked": a, "drop": drop,
        "benign_pct": pct(b), "attacked_pct": pct(a), "drop_pct": pct(drop),
        "status": "ok" if benign.ok and attacked.ok else "numeric_abort",
        "benign_config_hash": benign.summary["config_hash"],
        "attacked_config_hash": attacked.summary["config_hash"],
    }


def run_paired(config: ExperimentConfig, workers: int = 1, write: bool = True) -> dict:
    benign_cfg, attacked_cfg = paired_configs(config)
    datasets = load_datasets(config.dataset)
    benign = run_experiment(benign_cfg, workers, write, datasets)
    attacked = run_experiment(attacked_cfg, workers, write, datasets)
    summary = pair_summary(config.run_label, benign, attacked)
    if write:
        _write_json(summary, _output_dir(config) / f"{config.run_label}-pair.json")
    return summary


# sweeps over seeds and presets

def _seed_label(config: ExperimentConfig, seed: int) -> ExperimentConfig:
    return replace(config.with_seed(seed), run_label=f"{config.run_label}-s{seed}")


def _run_job(job: tuple[ExperimentConfig, bool, bool]) -> dict:
    config, paired, write = job
    if paired:
        return run_paired(config, 1, write)
    res = run_experiment(config, 1, write)
    return {"run_label": config.run_label, "final": res.final_accuracy,
            "final_pct": pct(res.final_accuracy), "status": res.summary["status"]}


def run_sweep(configs: Sequence[ExperimentConfig], seeds: Sequence[int], paired: bool = True,
              processes: int = 1, write: bool = True) -> list[dict]:
    """Every config at every seed; per-seed results plus their mean per config.

    Runs are independent, so the process pool only changes wall time, never
    the numbers.
    """
    jobs = [(_seed_label(c, s), paired, write) for c in configs for s in seeds]
    if processes > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=processes) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [_run_job(j) for j in jobs]
    keys = ("benign", "attacked", "drop") if paired else ("final",)
    out = []
    for i, config in enumerate(configs):
        per_seed = results[i * len(seeds):(i + 1) * len(seeds)]
        entry = {"run_label": config.run_label, "seeds": list(seeds), "per_seed": per_seed}
        for k in keys:
            entry[f"mean_{k}"] = float(np.mean([r[k] for r in per_seed]))
            entry[f"mean_{k}_pct"] = pct(entry[f"mean_{k}"])
        entry["status"] = "ok" if all(r["status"] == "ok" for r in per_seed) else "numeric_abort"
        out.append(entry)
    return out


def desk_config(**overrides) -> ExperimentConfig:
    """MNIST 4000/1000 subset, 20 clients, full participation, alpha 0.1, 60 rounds, TrMean m=4."""
    base = ExperimentConfig(
        federation=FederationConfig(total_clients=20, sample_fraction=1.0, local_epochs=2,
                                    server_lr=1.0, rounds=60, batch_size=50,
                                    optimizer=OptimizerState(0.05, 0.9, 1e-5), seed=0),
        partition=PartitionConfig(20, 0.1, 0),
        arch=ModelArch(784, (200, 100), 10, aux_tap_index=0, aux_hidden_dims=(64,)),
        defense=DefenseConfig(Defense.TRMEAN, 4),
    )
    return replace(base, **overrides)


def _ntd(beta: float, label: str, **kw) -> ExperimentConfig:
    kind = LossKind.CE if beta == 0 else LossKind.FEDNTD
    return desk_config(loss=LossSpec(kind, beta=beta), run_label=label,
                       attack=AttackConfig(AttackKind.DYN_OPT), **kw)


MOON_ARCH = ModelArch(784, (200, 100), 10, aux_tap_index=0, aux_hidden_dims=(100,))


def _moon(mu: float, label: str, **kw) -> ExperimentConfig:
    kind = LossKind.CE if mu == 0 else LossKind.MOON
    return desk_config(loss=LossSpec(kind, mu=mu), arch=MOON_ARCH, run_label=label,
                       attack=AttackConfig(AttackKind.STAT_OPT), **kw)


def preset(name: str) -> list[ExperimentConfig]:
    """Desk-scale sweep grids; every entry is meant to be run as a benign/attacked pair."""
    if name == "fig2":
        return ([_ntd(b, f"fig2-fedntd-beta{b:g}") for b in (0.0, 0.3, 1.0)]
                + [_moon(m, f"fig2-moon-mu{m:g}") for m in (0.0, 0.3, 1.0)])
    if name == "fig3":
        out = []
        for alpha in (0.05, 0.1, 0.3, 0.5):
            part = PartitionConfig(20, alpha, 0)
            out.append(_ntd(0.0, f"fig3-fedavg-alpha{alpha:g}", partition=part))
            out.append(_ntd(1.0, f"fig3-fedntd-alpha{alpha:g}", partition=part))
        return out
    if name == "table1":
        return [
            _ntd(0.0, "table1-fedavg"),
            _ntd(1.0, "table1-fedntd"),
            desk_config(loss=LossSpec(LossKind.HYDRA_NTD, beta=1.0, b=1.0, gamma=2.0),
                        attack=AttackConfig(AttackKind.DYN_OPT), run_label="table1-hydra-ntd"),
        ]
    if name == "table2":
        return [
            _moon(1.0, "table2-moon"),
            desk_config(loss=LossSpec(LossKind.HYDRA_MOON, mu=0.0, b=1.0, gamma=1.0), arch=MOON_ARCH,
                        attack=AttackConfig(AttackKind.STAT_OPT), run_label="table2-hydra-moon"),
        ]
    if name == "ablation-layer":
        return [
            desk_config(loss=LossSpec(LossKind.HYDRA_NTD, beta=1.0, b=1.0, gamma=2.0),
                        arch=ModelArch(784, (200, 100, 100), 10, aux_tap_index=tap, aux_hidden_dims=(64,)),
                        attack=AttackConfig(AttackKind.DYN_OPT), run_label=f"ablation-layer-tap{tap}")
            for tap in (0, 1)
        ]
    if name == "ablation-beta":
        return [
            desk_config(loss=LossSpec(LossKind.HYDRA_NTD, beta=1.0, b=b, gamma=2.0),
                        attack=AttackConfig(AttackKind.DYN_OPT), run_label=f"ablation-beta-b{b:g}")
            for b in (1.0, 4.0)
        ]
    raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")


PRESETS = ("fig2", "fig3", "table1", "table2", "ablation-layer", "ablation-beta")


# representations

def dump_representations(arch: ModelArch, params: ParameterVector, dataset: LabeledDataset,
                         path: str | Path, chunk: int = 2048) -> Path:
    """CSV with ``label,z0..z{k-1}``: the final hidden representation per example."""
    path = Path(path)
    width = arch.representation_dim
    try:
        fh = open(path, "w", newline="")
    except OSError as exc:
        raise OSError(f"cannot write representations to {path}: {exc.strerror}") from exc
    with fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label"] + [f"z{i}" for i in range(width)])
        for start in range(0, len(dataset), chunk):
            rep = forward(arch, params, dataset.features[start:start + chunk]).representation
            for label, row in zip(dataset.labels[start:start + chunk], rep):
                writer.writerow([int(label)] + [repr(float(v)) for v in row])
    return path
