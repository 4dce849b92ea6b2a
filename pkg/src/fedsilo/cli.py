"""``fedsilo`` command line: gen-data, train, compare, default-config.

Exit codes: 0 success, 2 config error, 3 data error, 4 training failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, DEFAULTS, dump_config, load_config
from .data import GenSpec, ParseError, generate, load_csv, save_csv, split_all
from .fadl import FadlConfig, SpecializedEnsemble, predict_routed, run_fadl
from .federated import FedConfig, run_federated
from .isolation import IsolationAudit
from .metrics import EvalReport, evaluate
from .nn import init_model, load_model, predict_proba, save_model
from .training import TrainSpec, derive_seed, pooled_key, train_centralized

log = logging.getLogger("fedsilo")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRAIN = 0, 2, 3, 4
MODES = ("central", "fedavg", "fadl")
REGIME_ORDER = {m: i for i, m in enumerate(MODES)}
DATASET_MANIFEST = "dataset.json"
RUN_MANIFEST = "manifest.json"


class DataError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    pass


def _sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _json_dump(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- gen-data ---------------------------------------------------------------


def gen_spec_from_config(cfg: dict) -> GenSpec:
    d = cfg["data"]
    return GenSpec(
        n_silos=d["n_silos"], feature_dim=d["feature_dim"],
        samples_per_silo=d["samples_per_silo"], heterogeneity=d["heterogeneity"],
        target_prevalence=d["target_prevalence"], seed=d["seed"],
        mean_active=d["mean_active"], rate_spread=d["rate_spread"],
        signal_strength=d["signal_strength"], private_rank=d["private_rank"],
        group_concentration=d["group_concentration"],
        prevalence_spread=d["prevalence_spread"],
    )


def dataset_fingerprint(data_dir, files) -> str:
    h = hashlib.sha256()
    for name in sorted(files):
        h.update(name.encode())
        h.update(_sha256_file(Path(data_dir) / name).encode())
    return h.hexdigest()


def cmd_gen_data(config_path, out_dir, seed=None) -> dict:
    """Write one CSV per silo plus ``dataset.json``; return the manifest."""
    cfg = load_config(config_path)
    if seed is not None:
        cfg["data"]["seed"] = int(seed)
    try:
        spec = gen_spec_from_config(cfg)
        spec.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from exc
    silos = generate(spec)
    entries = []
    for s in silos:
        name = f"{s.silo_id}.csv"
        save_csv([s], out / name)
        entries.append({"silo_id": s.silo_id, "file": name, "n_samples": s.n_samples,
                        "n_pos": int(s._labels.sum())})
    manifest = {
        "format": "fedsilo-dataset-1",
        "feature_dim": spec.feature_dim,
        "generator": {k: cfg["data"][k] for k in cfg["data"] if k not in ("split", "split_seed")},
        "split": list(cfg["data"]["split"]),
        "split_seed": cfg["data"]["split_seed"],
        "silos": entries,
        "fingerprint": dataset_fingerprint(out, [e["file"] for e in entries]),
    }
    _json_dump(manifest, out / DATASET_MANIFEST)
    return manifest


def load_dataset(data_dir):
    """Verify the fingerprint, load every silo and apply the recorded split."""
    d = Path(data_dir)
    try:
        manifest = json.loads((d / DATASET_MANIFEST).read_text())
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read {d / DATASET_MANIFEST}: {exc}") from exc
    files = [e["file"] for e in manifest["silos"]]
    try:
        actual = dataset_fingerprint(d, files)
    except OSError as exc:
        raise DataError(str(exc)) from exc
    if actual != manifest["fingerprint"]:
        raise DataError(f"stale data: fingerprint {actual[:12]} does not match "
                        f"manifest {manifest['fingerprint'][:12]}")
    silos = []
    for e in manifest["silos"]:
        try:
            loaded = load_csv(d / e["file"], feature_dim=manifest["feature_dim"])
        except ParseError as exc:
            raise DataError(str(exc)) from exc
        silos.extend(loaded)
    silos = split_all(silos, manifest["split"], manifest["split_seed"])
    return manifest, sorted(silos, key=lambda s: s.silo_id)


# -- train ------------------------------------------------------------------


def _seeds(cfg, mode):
    master = cfg["seed"]
    init = cfg["model"]["init_seed"] if cfg["model"]["init_seed"] is not None else master
    seeds = {"master": master, "init": init}
    if mode in ("fedavg", "fadl"):
        own = cfg[mode]["seed"]
        seeds[mode] = master if own is None else own
    return seeds


def _score(mode, artifact, silos, part, fallback=False):
    scores, labels, owner = [], [], []
    for s in silos:
        X, y = s.part(part)
        if len(y) == 0:
            continue
        if mode == "fadl":
            scores.append(predict_routed(artifact, s.silo_id, X, fallback=fallback))
        else:
            scores.append(predict_proba(artifact, X))
        labels.append(y)
        owner.extend([s.silo_id] * len(y))
    if not scores:
        return np.empty(0), np.empty(0, dtype=int), np.empty(0, dtype=str)
    return np.concatenate(scores), np.concatenate(labels), np.array(owner)


def evaluate_artifact(mode, artifact, silos, fallback=False) -> dict:
    reports = {}
    for part in ("test", "val"):
        s, y, owner = _score(mode, artifact, silos, part, fallback)
        reports[part] = evaluate(mode, s, y, owner).to_dict()
    return reports


def _train_regime(mode, cfg, silos, seeds, threads):
    t = cfg["train"]
    init = init_model([silos[0].feature_dim] + list(cfg["model"]["hidden"]) + [1],
                      seeds["init"])
    audit = IsolationAudit()
    trace = None
    if mode == "central":
        spec = TrainSpec(epochs=cfg["central"]["epochs"], batch_size=t["batch_size"],
                         learning_rate=t["learning_rate"], lam=t["l2"],
                         shuffle_seed=derive_seed(seeds["master"],
                                                  pooled_key([s.silo_id for s in silos])))
        artifact = train_centralized(silos, init, spec)
    elif mode == "fedavg":
        f = cfg["fedavg"]
        fc = FedConfig(f["global_cycles"], f["local_epochs"], t["learning_rate"],
                       t["batch_size"], t["l2"], seeds["fedavg"], n_jobs=threads)
        artifact, trace = run_federated(silos, init, fc, audit)
    else:
        f = cfg["fadl"]
        fc = FadlConfig(f["stage1_cycles"], f["stage1_local_epochs"], f["stage2_epochs"],
                        t["learning_rate"], t["batch_size"], t["l2"], seeds["fadl"],
                        n_jobs=threads)
        artifact = run_fadl(silos, init, fc, audit)
        trace = artifact.trace
    return artifact, trace, audit


def _persist(mode, artifact, out) -> dict:
    if mode == "fadl":
        ens = artifact.save(out / "ensemble")
        paths = ["ensemble/ensemble.json", "ensemble/" + ens["stage1"]]
        paths += ["ensemble/" + ens["models"][sid] for sid in ens["silo_ids"]]
    else:
        save_model(artifact, out / "model.fadl")
        paths = ["model.fadl"]
    return {p: _sha256_file(out / p) for p in paths}


def load_artifact(mode, run_dir):
    run_dir = Path(run_dir)
    if mode == "fadl":
        return SpecializedEnsemble.load(run_dir / "ensemble")
    return load_model(run_dir / "model.fadl")


def cmd_train(mode, config_path, data_dir, out_dir, seed=None, threads=1) -> dict:
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    if threads < 1:
        raise ConfigError("--threads must be >= 1")
    cfg = load_config(config_path, seed)
    dataset, silos = load_dataset(data_dir)
    if silos[0].feature_dim != dataset["feature_dim"]:
        raise DataError("feature dim disagrees with the dataset manifest")
    seeds = _seeds(cfg, mode)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    started = time.perf_counter()
    try:
        with np.errstate(over="raise", invalid="raise"):
            artifact, trace, audit = _train_regime(mode, cfg, silos, seeds, threads)
    except FloatingPointError as exc:
        raise TrainingError(f"numerical failure during training: {exc}") from exc
    duration = time.perf_counter() - started

    models = _persist(mode, artifact, out)
    reports = evaluate_artifact(mode, artifact, silos, cfg["fadl"]["fallback"])
    _json_dump(reports, out / "metrics.json")
    if trace is not None:
        trace.write_jsonl(out / "trace.jsonl")

    run_key = json.dumps([mode, dataset["fingerprint"], cfg], sort_keys=True)
    manifest = {
        "format": "fedsilo-run-1",
        "version": __version__,
        "run_id": hashlib.sha256(run_key.encode()).hexdigest()[:10],
        "regime": mode,
        "config": cfg,
        "seeds": seeds,
        "threads": threads,
        "dataset": {"dir": str(Path(data_dir).resolve()),
                    "fingerprint": dataset["fingerprint"]},
        "models": models,
        "schedule": _schedule(mode, cfg),
        "eval": reports["test"],
        "eval_val": reports["val"],
        "cross_silo_accesses": audit.cross_silo_accesses,
        "duration_sec": round(duration, 3),
    }
    _json_dump(manifest, out / RUN_MANIFEST)
    return manifest


def _schedule(mode, cfg):
    t = cfg["train"]
    common = {"batch_size": t["batch_size"], "learning_rate": t["learning_rate"],
              "l2": t["l2"]}
    if mode == "central":
        return {"epochs": cfg["central"]["epochs"], **common}
    if mode == "fedavg":
        return {"global_cycles": cfg["fedavg"]["global_cycles"],
                "local_epochs": cfg["fedavg"]["local_epochs"], **common}
    f = cfg["fadl"]
    return {"stage1_cycles": f["stage1_cycles"],
            "stage1_local_epochs": f["stage1_local_epochs"],
            "stage2_epochs": f["stage2_epochs"], **common}


# -- compare ----------------------------------------------------------------


class ComparisonError(DataError):
    pass


def _load_manifest(path):
    p = Path(path)
    if p.is_dir():
        p = p / RUN_MANIFEST
    try:
        return p.parent, json.loads(p.read_text())
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read run manifest {p}: {exc}") from exc


def recompute_eval(run_dir, manifest) -> dict:
    """Re-score the persisted model(s) on the referenced dataset."""
    _, silos = load_dataset(manifest["dataset"]["dir"])
    for rel, digest in manifest["models"].items():
        if _sha256_file(Path(run_dir) / rel) != digest:
            raise DataError(f"model file {rel} changed since the run")
    artifact = load_artifact(manifest["regime"], run_dir)
    fallback = manifest["config"]["fadl"]["fallback"]
    return evaluate_artifact(manifest["regime"], artifact, silos, fallback)["test"]


def cmd_compare(paths, recompute=False) -> dict:
    if not paths:
        raise ConfigError("compare needs at least one run manifest")
    runs = [_load_manifest(p) for p in paths]
    prints = {m["dataset"]["fingerprint"] for _, m in runs}
    if len(prints) > 1:
        raise ComparisonError("runs reference different datasets: "
                              + ", ".join(sorted(f[:12] for f in prints)))
    rows = []
    for run_dir, m in runs:
        report = EvalReport.from_dict(m["eval"])
        if recompute:
            fresh = EvalReport.from_dict(recompute_eval(run_dir, m))
            if (fresh.auc_roc, fresh.auc_pr) != (report.auc_roc, report.auc_pr):
                raise DataError(f"run {m['run_id']}: recomputed metrics differ from manifest")
        rows.append({"regime": m["regime"], "run_id": m["run_id"], "run_dir": str(run_dir),
                     "auc_roc": report.auc_roc, "auc_pr": report.auc_pr,
                     "n_pos": report.n_pos, "n_neg": report.n_neg})
    rows.sort(key=lambda r: (REGIME_ORDER.get(r["regime"], len(MODES)), r["regime"], r["run_id"]))
    base = next((r for r in rows if r["regime"] == "central"), None)
    if base is not None and len(rows) > 1:
        for r in rows:
            r["delta_auc_roc"] = _delta(r["auc_roc"], base["auc_roc"])
            r["delta_auc_pr"] = _delta(r["auc_pr"], base["auc_pr"])
    return {"dataset_fingerprint": prints.pop(), "rows": rows}


def _delta(a, b):
    return None if a is None or b is None else a - b


def _fmt(x, signed=False):
    if x is None:
        return "-"
    return f"{x:+.4f}" if signed else f"{x:.4f}"


def format_table(result) -> str:
    rows = result["rows"]
    with_delta = any("delta_auc_roc" in r for r in rows)
    head = ["regime", "run_id", "AUCROC", "AUCPR"] + (["dAUCROC", "dAUCPR"] if with_delta else [])
    body = []
    for r in rows:
        line = [r["regime"], r["run_id"], _fmt(r["auc_roc"]), _fmt(r["auc_pr"])]
        if with_delta:
            line += [_fmt(r.get("delta_auc_roc"), True), _fmt(r.get("delta_auc_pr"), True)]
        body.append(line)
    widths = [max(len(str(c)) for c in col) for col in zip(head, *body)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    return "\n".join([fmt.format(*head)] + [fmt.format(*b) for b in body])


# -- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedsilo", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate synthetic silos as CSV")
    g.add_argument("--config")
    g.add_argument("--out-dir", required=True)
    g.add_argument("--seed", type=int, help="override data.seed")

    t = sub.add_parser("train", help="train one regime and evaluate it")
    t.add_argument("--mode", choices=MODES, required=True)
    t.add_argument("--config")
    t.add_argument("--data-dir", required=True)
    t.add_argument("--out-dir", required=True)
    t.add_argument("--seed", type=int, help="override the master training seed")
    t.add_argument("--threads", type=int, default=1,
                   help="worker threads for per-silo local training")

    c = sub.add_parser("compare", help="tabulate runs on the same dataset")
    c.add_argument("manifests", nargs="+", help="run directories or manifest.json files")
    c.add_argument("--json", dest="json_out", help="also write the structured record here")
    c.add_argument("--recompute", action="store_true",
                   help="re-score persisted models and check they reproduce the manifest")

    sub.add_parser("default-config", help="print the default configuration")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gen-data":
            m = cmd_gen_data(args.config, args.out_dir, args.seed)
            print(f"wrote {len(m['silos'])} silos to {args.out_dir} "
                  f"(fingerprint {m['fingerprint'][:12]})")
        elif args.command == "train":
            m = cmd_train(args.mode, args.config, args.data_dir, args.out_dir,
                          args.seed, args.threads)
            result = {"dataset_fingerprint": m["dataset"]["fingerprint"],
                      "rows": [{"regime": m["regime"], "run_id": m["run_id"],
                                "auc_roc": m["eval"]["auc_roc"],
                                "auc_pr": m["eval"]["auc_pr"]}]}
            print(format_table(result))
        elif args.command == "compare":
            result = cmd_compare(args.manifests, args.recompute)
            print(format_table(result))
            if args.json_out:
                _json_dump(result, args.json_out)
        else:
            sys.stdout.write(dump_config(DEFAULTS))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
