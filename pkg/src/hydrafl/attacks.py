"""Untargeted model poisoning: static sign-direction (Stat-Opt) and
optimized-scale (Dyn-Opt) updates crafted from the round's benign updates.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, InputError

Agr = Callable[[Sequence[np.ndarray]], np.ndarray]


class AttackKind(str, Enum):
    NONE = "NONE"
    STAT_OPT = "STAT_OPT"
    DYN_OPT = "DYN_OPT"


class StatOptForm(str, Enum):
    DEVIATION = "DEVIATION"  # mean + gamma * w
    LITERAL = "LITERAL"      # -gamma * w


class DynOptDirection(str, Enum):
    SIGN_OF_MEAN = "SIGN_OF_MEAN"
    UNIT_MEAN = "UNIT_MEAN"
    STD = "STD"


@dataclass(frozen=True)
class AttackConfig:
    kind: AttackKind = AttackKind.NONE
    malicious_fraction: float = 0.2
    # Dyn-Opt: first probe of the gamma search; Stat-Opt: the fixed gamma
    gamma_init: float = 10.0
    gamma_search_iters: int = 20
    gamma_threshold: float = 1e-3
    stat_opt_form: StatOptForm = StatOptForm.DEVIATION
    dyn_opt_direction: DynOptDirection = DynOptDirection.UNIT_MEAN

    def __post_init__(self):
        object.__setattr__(self, "kind", AttackKind(self.kind))
        object.__setattr__(self, "stat_opt_form", StatOptForm(self.stat_opt_form))
        object.__setattr__(self, "dyn_opt_direction", DynOptDirection(self.dyn_opt_direction))
        if not 0 <= self.malicious_fraction < 0.5:
            raise ConfigError("malicious_fraction must be in [0, 0.5)")
        if not self.gamma_init > 0 or not self.gamma_threshold > 0:
            raise ConfigError("gamma_init and gamma_threshold must be positive")
        if self.gamma_search_iters < 0:
            raise ConfigError("gamma_search_iters must be non-negative")

    def malicious_ids(self, total_clients: int) -> frozenset[int]:
        """The first ceil(fraction * N) client ids, fixed for the whole run."""
        count = int(np.ceil(round(self.malicious_fraction * total_clients, 9)))
        return frozenset(range(count))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "malicious_fraction": self.malicious_fraction,
            "gamma_init": self.gamma_init,
            "gamma_search_iters": self.gamma_search_iters,
            "gamma_threshold": self.gamma_threshold,
            "stat_opt_form": self.stat_opt_form.value,
            "dyn_opt_direction": self.dyn_opt_direction.value,
        }


def _benign_mean(benign_updates: Sequence[np.ndarray]) -> np.ndarray:
    if len(benign_updates) == 0:
        raise InputError("the attack needs at least one benign update")
    stacked = np.stack([np.asarray(u, dtype=np.float64) for u in benign_updates])
    return stacked.mean(axis=0)


def stat_opt(benign_updates: Sequence[np.ndarray], gamma: float,
             form: StatOptForm | str = StatOptForm.DEVIATION) -> np.ndarray:
    """w = -sign(mean of benign); DEVIATION returns mean + gamma*w, LITERAL returns -gamma*w."""
    if not gamma > 0:
        raise ConfigError("Stat-Opt gamma must be positive")
    mean = _benign_mean(benign_updates)
    w = -np.sign(mean)
    if StatOptForm(form) is StatOptForm.LITERAL:
        return -gamma * w
    return mean + gamma * w


def dyn_opt_direction(benign_updates: Sequence[np.ndarray],
                      kind: DynOptDirection | str = DynOptDirection.UNIT_MEAN) -> np.ndarray:
    kind = DynOptDirection(kind)
    mean = _benign_mean(benign_updates)
    if kind is DynOptDirection.SIGN_OF_MEAN:
        return -np.sign(mean)
    if kind is DynOptDirection.STD:
        return -np.stack(benign_updates).std(axis=0)
    norm = np.linalg.norm(mean)
    return -mean / norm if norm > 0 else np.zeros_like(mean)


@dataclass
class DynOptResult:
    update: np.ndarray
    gamma: float
    deviation: float
    probes: list[tuple[float, float]]


def dyn_opt(benign_updates: Sequence[np.ndarray], agr_oracle: Agr, config: AttackConfig,
            num_malicious: int = 1, direction: Optional[np.ndarray] = None) -> DynOptResult:
    """Scale a data-dependent direction so the aggregate moves as far as possible.

    The objective is ``||agr(m copies of p(gamma) + benign) - agr(benign)||``
    with ``p(gamma) = mean + gamma * w``. gamma = 0 and gamma_init are always
    probed; from gamma_init the search steps up after an improvement and down
    otherwise, halving the step each time, for at most gamma_search_iters
    probes or until the step drops below gamma_threshold. The best probe wins.
    """
    benign = [np.asarray(u, dtype=np.float64) for u in benign_updates]
    mean = _benign_mean(benign)
    w = dyn_opt_direction(benign, config.dyn_opt_direction) if direction is None else direction
    reference = agr_oracle(benign)
    probes: list[tuple[float, float]] = []

    def deviation(gamma: float) -> float:
        poisoned = mean + gamma * w
        dev = float(np.linalg.norm(agr_oracle([poisoned] * num_malicious + benign) - reference))
        probes.append((gamma, dev))
        return dev

    best_gamma, best_dev = 0.0, deviation(0.0)
    gamma, step = config.gamma_init, config.gamma_init / 2
    for _ in range(max(1, config.gamma_search_iters)):
        dev = deviation(gamma)
        if dev > best_dev:
            best_gamma, best_dev = gamma, dev
            gamma += step
        else:
            gamma -= step
        step /= 2
        if step < config.gamma_threshold:
            break
    return DynOptResult(mean + best_gamma * w, best_gamma, best_dev, probes)


def craft(benign_updates: Sequence[np.ndarray], config: AttackConfig, agr_oracle: Agr,
          num_malicious: int) -> np.ndarray:
    if config.kind is AttackKind.STAT_OPT:
        return stat_opt(benign_updates, config.gamma_init, config.stat_opt_form)
    if config.kind is AttackKind.DYN_OPT:
        return dyn_opt(benign_updates, agr_oracle, config, num_malicious).update
    raise ConfigError(f"nothing to craft for attack kind {config.kind.value}")


def apply_attack(sampled_updates: Sequence, malicious_ids, config: AttackConfig, agr_oracle: Agr,
                 reference_updates: Optional[Sequence] = None) -> list:
    """Replace every sampled malicious client's update with one crafted vector.

    ``sampled_updates`` are objects with ``client_id`` and ``delta`` (a
    ParameterVector or array). The adversary sees all benign updates of the
    round; ``reference_updates`` stands in for them when no benign client was
    sampled. Benign entries are returned untouched.
    """
    updates = list(sampled_updates)
    bad = [u for u in updates if u.client_id in malicious_ids]
    if config.kind is AttackKind.NONE or not bad:
        return updates
    benign = [u for u in updates if u.client_id not in malicious_ids]
    pool = benign if benign else list(reference_updates or [])
    vectors = [np.asarray(getattr(u.delta, "values", u.delta)) for u in pool]
    crafted = craft(vectors, config, agr_oracle, len(bad))
    out = []
    for u in updates:
        if u.client_id in malicious_ids:
            delta = u.delta.with_values(crafted.copy()) if hasattr(u.delta, "with_values") else crafted.copy()
            u = replace(u, delta=delta)
        out.append(u)
    return out
