"""Federated averaging across silos.

Each global cycle broadcasts the current model, trains a private copy on
every silo's training split, and combines the results with weights
proportional to training-split sizes. Local tasks may run on a thread pool;
results do not depend on scheduling because every silo has its own derived
seed and aggregation always sums in ascending silo-id order.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

from .isolation import IsolationAudit
from .nn import Model, axpy_model
from .training import TrainSpec, derive_seed, train_with_loss


@dataclass(frozen=True)
class FedConfig:
    global_cycles: int = 20
    local_epochs: int = 5
    learning_rate: float = 0.01
    batch_size: int = 100
    lam: float = 0.01
    seed: int = 0
    aggregation_weighting: str = "by_train_count"
    # False: every silo shuffles with the master seed itself
    seed_by_silo: bool = True
    n_jobs: int = 1

    def __post_init__(self):
        if self.global_cycles < 1:
            raise ValueError("global_cycles must be >= 1")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.aggregation_weighting != "by_train_count":
            raise ValueError(f"unsupported weighting {self.aggregation_weighting!r}")
        if self.n_jobs < 1:
            raise ValueError("n_jobs must be >= 1")


@dataclass
class CycleRecord:
    cycle: int
    silo_losses: dict[str, float]
    checksum: str


@dataclass
class CycleTrace:
    records: list[CycleRecord] = field(default_factory=list)
    cross_silo_accesses: int = 0

    def __len__(self):
        return len(self.records)

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps({"cycle": r.cycle, "silo_losses": r.silo_losses,
                                     "checksum": r.checksum}, sort_keys=True) + "\n")

    @classmethod
    def read_jsonl(cls, path) -> "CycleTrace":
        trace = cls()
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    d = json.loads(line)
                    trace.records.append(CycleRecord(d["cycle"], d["silo_losses"],
                                                     d["checksum"]))
        return trace


def aggregation_coefficients(sample_counts: Sequence[int]) -> list[float]:
    if any(int(n) < 1 for n in sample_counts):
        raise ValueError("every sample count must be >= 1")
    total = sum(int(n) for n in sample_counts)
    if total == 0:
        raise ValueError("total sample count is zero")
    return [int(n) / total for n in sample_counts]


def aggregate(models: Sequence[Model], sample_counts: Sequence[int],
              silo_ids: Sequence[str] | None = None) -> Model:
    """Sample-size-weighted average ``sum(n_i / N * W_i)``.

    Evaluated as ``W_0 + sum_{i>0} (n_i / N) * (W_i - W_0)`` with the
    models ordered by ``silo_ids`` (or by position). The two forms are equal
    because the weights sum to one; the anchored one makes identical inputs
    an exact fixed point and a single model pass through unchanged.
    """
    if len(models) == 0 or len(models) != len(sample_counts):
        raise ValueError("models and sample_counts must be non-empty and equal length")
    if silo_ids is not None:
        if len(silo_ids) != len(models):
            raise ValueError("silo_ids must match models")
        order = sorted(range(len(models)), key=lambda k: str(silo_ids[k]))
        models = [models[k] for k in order]
        sample_counts = [sample_counts[k] for k in order]
    coef = aggregation_coefficients(sample_counts)
    anchor = models[0]
    for m in models[1:]:
        if not anchor.same_shape(m):
            raise ValueError("cannot aggregate models of different shapes")
    result = axpy_model([anchor], [1.0])
    for m, c in zip(models[1:], coef[1:]):
        delta = axpy_model([m, anchor], [1.0, -1.0])
        result = axpy_model([result, delta], [1.0, c])
    return result


def local_seed(config: FedConfig, silo_id: str, stage: str = "") -> int:
    if not config.seed_by_silo:
        return config.seed
    return derive_seed(config.seed, silo_id, stage) if stage else derive_seed(config.seed, silo_id)


def local_spec(config: FedConfig, silo_id: str, cycle: int) -> TrainSpec:
    """Training spec for one silo in global cycle ``cycle`` (1-based).

    The shuffle seed is ``derive_seed(seed, silo_id)`` and epochs are
    numbered continuously across cycles, so the permutation used depends
    only on (master seed, silo id, cycle, local epoch).
    """
    return TrainSpec(
        epochs=config.local_epochs,
        batch_size=config.batch_size,
        learning_rate=config.learning_rate,
        lam=config.lam,
        shuffle_seed=local_seed(config, silo_id),
        epoch_offset=(cycle - 1) * config.local_epochs,
    )


def _local_task(silo, model, spec, audit):
    with audit.local(silo.silo_id):
        X, y = silo.part("train")
        return train_with_loss(model, X, y, spec)


def run_federated(silos, init: Model, config: FedConfig,
                  audit: IsolationAudit | None = None) -> tuple[Model, CycleTrace]:
    """Run ``config.global_cycles`` rounds of federated averaging from ``init``."""
    if len(silos) == 0:
        raise ValueError("need at least one silo")
    ids = [s.silo_id for s in silos]
    if len(set(ids)) != len(ids):
        raise ValueError("silo ids must be unique")
    for s in silos:
        if s.feature_dim != init.input_dim:
            raise ValueError(f"silo {s.silo_id} has {s.feature_dim} features, model "
                             f"expects {init.input_dim}")
        if s.n_train < 1:
            raise ValueError(f"silo {s.silo_id} has no training samples")
    silos = sorted(silos, key=lambda s: s.silo_id)
    counts = [s.n_train for s in silos]
    audit = audit or IsolationAudit()
    trace = CycleTrace()
    current = init
    pool = ThreadPoolExecutor(config.n_jobs) if config.n_jobs > 1 else None
    try:
        with audit.run():
            for t in range(1, config.global_cycles + 1):
                jobs = [(s, current, local_spec(config, s.silo_id, t), audit)
                        for s in silos]
                if pool is None:
                    results = [_local_task(*j) for j in jobs]
                else:
                    results = list(pool.map(lambda j: _local_task(*j), jobs))
                current = aggregate([m for m, _ in results], counts)
                trace.records.append(CycleRecord(
                    t, {s.silo_id: loss for s, (_, loss) in zip(silos, results)},
                    current.checksum()[:16]))
    finally:
        if pool is not None:
            pool.shutdown()
    trace.cross_silo_accesses = audit.cross_silo_accesses
    return current, trace


def coefficients_sum_error(sample_counts: Sequence[int]) -> float:
    return abs(math.fsum(aggregation_coefficients(sample_counts)) - 1.0)
