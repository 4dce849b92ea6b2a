"""Federated-autonomous training.

Stage one is ordinary federated averaging over all layers. Stage two
freezes the first layer (weights and biases) and fine-tunes the remaining
layers on each silo separately, giving one specialized model per silo that
shares the stage-one first layer.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .federated import FedConfig, CycleTrace, local_seed, run_federated
from .isolation import IsolationAudit
from .nn import Model, forward, load_model, save_model
from .training import TrainSpec, train


class UnknownSiloError(KeyError):
    pass


@dataclass(frozen=True)
class FadlConfig:
    stage1_cycles: int = 10
    stage1_local_epochs: int = 5
    stage2_epochs: int = 50
    learning_rate: float = 0.01
    batch_size: int = 100
    lam: float = 0.01
    seed: int = 0
    seed_by_silo: bool = True
    n_jobs: int = 1

    def __post_init__(self):
        if self.stage1_cycles < 1:
            raise ValueError("stage1_cycles must be >= 1")
        if self.stage2_epochs < 0:
            raise ValueError("stage2_epochs must be >= 0")

    def stage1(self) -> FedConfig:
        return FedConfig(
            global_cycles=self.stage1_cycles,
            local_epochs=self.stage1_local_epochs,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            lam=self.lam,
            seed=self.seed,
            seed_by_silo=self.seed_by_silo,
            n_jobs=self.n_jobs,
        )


@dataclass
class SpecializedEnsemble:
    shared: Model
    models: dict[str, Model]
    trace: CycleTrace = field(default_factory=CycleTrace)

    def __post_init__(self):
        for sid, m in self.models.items():
            if not m.same_shape(self.shared):
                raise ValueError(f"model for silo {sid} differs in shape")

    @property
    def silo_ids(self) -> list[str]:
        return sorted(self.models)

    def first_layer_shared(self) -> bool:
        base = self.shared.layers[0]
        return all(
            (m.layers[0].weights == base.weights).all()
            and (m.layers[0].biases == base.biases).all()
            for m in self.models.values()
        )

    def save(self, directory) -> dict:
        """Write ``stage1.fadl``, one model per silo and ``ensemble.json``."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        save_model(self.shared, d / "stage1.fadl")
        files = {}
        for k, sid in enumerate(self.silo_ids):
            name = f"silo_{k:04d}.fadl"
            save_model(self.models[sid], d / name)
            files[sid] = name
        manifest = {"format": "fadl-ensemble-1", "stage1": "stage1.fadl",
                    "silo_ids": self.silo_ids, "models": files}
        (d / "ensemble.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return manifest

    @classmethod
    def load(cls, directory) -> "SpecializedEnsemble":
        d = Path(directory)
        manifest = json.loads((d / "ensemble.json").read_text())
        shared = load_model(d / manifest["stage1"])
        models = {sid: load_model(d / manifest["models"][sid])
                  for sid in manifest["silo_ids"]}
        return cls(shared, models)


def stage2_spec(config: FadlConfig, silo_id: str, n_layers: int) -> TrainSpec:
    fed = config.stage1()
    return TrainSpec(
        epochs=config.stage2_epochs,
        batch_size=config.batch_size,
        learning_rate=config.learning_rate,
        lam=config.lam,
        shuffle_seed=local_seed(fed, silo_id, "stage2"),
        freeze_mask=(True,) + (False,) * (n_layers - 1),
    )


def _specialize(silo, model, spec, audit):
    with audit.local(silo.silo_id):
        X, y = silo.part("train")
        return train(model, X, y, spec)


def run_fadl(silos, init: Model, config: FadlConfig,
             audit: IsolationAudit | None = None) -> SpecializedEnsemble:
    if init.n_layers < 2:
        raise ValueError("FADL needs at least two layers (one frozen, one local)")
    audit = audit or IsolationAudit()
    shared, trace = run_federated(silos, init, config.stage1(), audit)
    silos = sorted(silos, key=lambda s: s.silo_id)
    jobs = [(s, shared, stage2_spec(config, s.silo_id, init.n_layers), audit)
            for s in silos]
    with audit.run():
        if config.n_jobs > 1:
            with ThreadPoolExecutor(config.n_jobs) as pool:
                models = list(pool.map(lambda j: _specialize(*j), jobs))
        else:
            models = [_specialize(*j) for j in jobs]
    trace.cross_silo_accesses = audit.cross_silo_accesses
    return SpecializedEnsemble(shared, {s.silo_id: m for s, m in zip(silos, models)},
                               trace)


def predict_routed(ensemble: SpecializedEnsemble, silo_id, x,
                   fallback: bool = False):
    """Score ``x`` with the model specialized for ``silo_id``.

    Unknown silos raise :class:`UnknownSiloError` unless ``fallback`` is set,
    in which case the shared stage-one model is used.
    """
    model = ensemble.models.get(str(silo_id))
    if model is None:
        if not fallback:
            raise UnknownSiloError(f"no specialized model for silo {silo_id!r}")
        model = ensemble.shared
    return forward(model, x)[0]
