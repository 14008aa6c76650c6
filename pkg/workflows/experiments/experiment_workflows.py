"""Experiment workflows behind the command-line subcommands.

Each `cmd_*` function takes a validated ExperimentConfig, writes its results
CSV, a summary CSV and a JSON run manifest next to `config.output`, and returns
the tables it wrote. Tasks fan out over a process pool and are collected in
submission order, so a rerun with the same config and seed writes the same
bytes (wall times excepted, which stay blank unless record_timings is set).
"""

import concurrent.futures
import json
import math
import os
import platform
import sys
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from itertools import product
from pathlib import Path

import numpy as np
import pandas as pd
import requests
import scipy
import yaml

from ..flynn import __version__
from ..flynn.core_hash import STREAM_GRID, HashParams, RngState
from ..flynn.data import (
    SynthSpec,
    balanced_accuracy,
    binarize,
    fetch_dataset,
    kfold,
    load_csv,
    make_classification,
    minmax_scale,
    normalized_accuracy,
    read_feature_matrix,
    shard,
    train_test_split,
)
from ..flynn.dp_mechanism import DPParams
from ..flynn.fbf_classifier import (
    accuracy,
    counts_for_hashes,
    load_model,
    model_from_counts,
    novelty_scores_batch,
    predict,
    save_model,
    train,
    train_sbfc,
)
from ..flynn.federated import FederationPlan, comm_report, train_flynn_fl
from ..flynn.knn_baseline import knn_predict
from ..flynn.utils import get_logger, stopwatch
from .config import SCHEMA_VERSION, ExperimentConfig

logger = get_logger(__name__)


@dataclass
class ResultRecord:
    """One row of a results file: a (method, params, fold, repetition) measurement."""

    experiment_id: str
    method: str
    params: str
    repetition: int
    fold: int = None
    seed: int = None
    accuracy: float = None
    normalized_accuracy: float = None
    balanced_accuracy: float = None
    wall_time: float = None
    bytes_sent: int = None
    bytes_received: int = None
    schema_version: int = SCHEMA_VERSION


RESULT_COLUMNS = ["schema_version"] + [f.name for f in fields(ResultRecord) if f.name != "schema_version"]


@dataclass
class RunArtifacts:
    results: pd.DataFrame
    summary: pd.DataFrame
    paths: dict = field(default_factory=dict)


def encode_params(**params) -> str:
    return json.dumps(params, sort_keys=True)


def derive_seed(root: int, *keys: int) -> int:
    """Deterministic 64-bit sub-seed of `root` for the task identified by `keys`."""
    sequence = np.random.SeedSequence(root, spawn_key=tuple(int(k) for k in keys))
    return int(sequence.generate_state(1, dtype=np.uint64)[0])


def artifact_path(output, suffix: str) -> Path:
    output = Path(output)
    return output.with_name(f"{output.stem}{suffix}")


def write_results(records: list, path) -> pd.DataFrame:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table = pd.DataFrame([asdict(record) for record in records], columns=RESULT_COLUMNS)
    table.to_csv(path, index=False)
    return table


def write_manifest(config: ExperimentConfig, path, **extra) -> Path:
    """Config echo, package versions and host information for a run."""
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "created": datetime.now(timezone.utc).isoformat(),
        "config": config.as_dict(),
        "versions": {
            "flynn": __version__,
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pandas": pd.__version__,
            "pyyaml": yaml.__version__,
            "requests": requests.__version__,
        },
        "host": {"platform": platform.platform(), "machine": platform.machine(), "cpu_count": os.cpu_count()},
        **extra,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    return path


def resolve_dataset(config: ExperimentConfig, seed: int, extra_rows: int = 0):
    """Materialize the configured dataset; synthetic sources are generated from `seed`."""
    spec = config.dataset
    if spec.source == "synth":
        dataset = make_classification(
            SynthSpec(
                n=spec.n + extra_rows,
                d=spec.d,
                n_classes=spec.n_classes,
                clusters_per_class=spec.clusters_per_class,
                class_sep=spec.class_sep,
                seed=seed,
                n_informative=spec.n_informative,
            )
        )
    else:
        path = spec.path if spec.source == "csv" else fetch_dataset(spec.url)
        dataset = load_csv(path, spec.label_column, spec.has_header)
    if spec.binarize is not None:
        dataset = binarize(dataset, spec.binarize)
    if spec.minmax:
        dataset = minmax_scale(dataset)
    return dataset


def _log_uniform(rng: RngState, low: float, high: float) -> float:
    return math.exp(rng.generator.uniform(math.log(low), math.log(high)))


def sample_hash_grid(config: ExperimentConfig, d: int) -> list:
    """Log-uniform FlyHash settings over the configured ranges, fixed by the root seed."""
    grid = config.grid
    rng = RngState(config.seed, STREAM_GRID)
    s_max = min(d, max(grid.s_min, math.floor(grid.s_max_fraction * d)))
    s_min = min(grid.s_min, s_max)
    settings = []
    for _ in range(grid.settings):
        m = max(1, round(d * _log_uniform(rng, *grid.m_over_d)))
        s = min(s_max, max(s_min, round(_log_uniform(rng, s_min, s_max))))
        rho = min(m, round(_log_uniform(rng, *grid.rho)))
        settings.append({"m": m, "s": s, "rho": rho})
    return settings


_SHARED = {}


def _share(items: dict):
    """Pool initializer: large read-only task inputs, pickled once per worker."""
    _SHARED.clear()
    _SHARED.update(items)


def _call(function, args):
    return function(*args)


def run_tasks(function, arguments: list, workers: int = 1, initializer=None, initargs: tuple = ()) -> list:
    """Run `function(*args)` for every entry of `arguments`; results come back in submission order."""
    if workers <= 1:
        if initializer is not None:
            initializer(*initargs)
        return [function(*args) for args in arguments]
    with concurrent.futures.ProcessPoolExecutor(
        max_workers=workers, initializer=initializer, initargs=initargs
    ) as executor:
        futures = [executor.submit(function, *args) for args in arguments]
        return [future.result() for future in futures]


def _knn_task(train_set, test_set, ks) -> list:
    with stopwatch() as clock:
        predictions = knn_predict(train_set, test_set.X, ks)
    return [
        (k, float(np.mean(predicted == test_set.y)), balanced_accuracy(test_set.y, predicted), clock["seconds"])
        for k, predicted in predictions.items()
    ]


def _score_gammas(base, test_set, gammas, setup_seconds: float) -> list:
    """(gamma, accuracy, balanced accuracy, seconds) for every decay rate; counts are shared."""
    rows = []
    for gamma in gammas:
        with stopwatch() as clock:
            model = base.with_gamma(gamma)
            predicted = predict(model, test_set.X)
        rows.append(
            (
                model.gamma_text,
                float(np.mean(predicted == test_set.y)),
                balanced_accuracy(test_set.y, predicted),
                setup_seconds + clock["seconds"],
            )
        )
    return rows


def _flynn_task(train_set, test_set, setting: dict, seed: int, gammas) -> list:
    params = HashParams(seed=seed, **setting)
    with stopwatch() as hashing:
        hasher, counts = counts_for_hashes(train_set, params)
        base = model_from_counts(hasher, counts, "0", train_set.labels, seed)
    return _score_gammas(base, test_set, gammas, hashing["seconds"])


def _sbfc_task(train_set, test_set, m: int, seed: int, gammas) -> list:
    with stopwatch() as hashing:
        base = train_sbfc(train_set, m, seed)
    return _score_gammas(base, test_set, gammas, hashing["seconds"])


def _standard_error(values: pd.Series) -> float:
    return float(values.std(ddof=1) / math.sqrt(len(values))) if len(values) > 1 else 0.0


def _bench_tasks(config: ExperimentConfig, train_set, test_set, grid: list, seed: int) -> list:
    """(method, function, args) tuples for one fold."""
    methods = config.methods
    gammas = config.grid.gamma[:1] if config.dry_run else config.grid.gamma
    tasks = []
    if "knn" in methods or "1nn" in methods:
        ks = [k for k in config.grid.knn_k if k <= train_set.n] if "knn" in methods else []
        ks = ks[:1] if config.dry_run else ks
        if "1nn" in methods and 1 not in ks:
            ks = [1] + ks
        tasks.append(("knn", _knn_task, (train_set, test_set, ks)))
    if "flynn" in methods:
        for index, setting in enumerate(grid):
            tasks.append(("flynn", _flynn_task, (train_set, test_set, setting, derive_seed(seed, index), gammas)))
    if "sbfc" in methods:
        ratios = config.grid.sbfc_m_over_d[:1] if config.dry_run else config.grid.sbfc_m_over_d
        for index, ratio in enumerate(ratios):
            m = max(1, round(ratio * train_set.d))
            tasks.append(("sbfc", _sbfc_task, (train_set, test_set, m, derive_seed(seed, 1000 + index), gammas)))
    return tasks


def _bench_records(config, experiment_id, method, args, output, repetition, fold, data_seed) -> list:
    """kNN rows carry the dataset seed; hashing rows carry their matrix seed."""
    rows = []
    if method == "knn":
        configured = set(config.grid.knn_k)
        for k, acc, balanced, seconds in output:
            if "knn" in config.methods and k in configured:
                rows.append(("knn", encode_params(k=k), data_seed, acc, balanced, seconds))
            if k == 1 and "1nn" in config.methods:
                rows.append(("1nn", encode_params(k=1), data_seed, acc, balanced, seconds))
    else:
        seed = args[3]
        setting = args[2] if method == "flynn" else {"m": args[2]}
        for gamma, acc, balanced, seconds in output:
            rows.append((method, encode_params(gamma=gamma, **setting), seed, acc, balanced, seconds))
    return [
        ResultRecord(
            experiment_id,
            name,
            params,
            repetition,
            fold=fold,
            seed=seed,
            accuracy=acc,
            balanced_accuracy=balanced,
            wall_time=seconds if config.record_timings else None,
        )
        for name, params, seed, acc, balanced, seconds in rows
    ]


def best_tuned(results: pd.DataFrame) -> pd.DataFrame:
    """Per (method, repetition): the maximum over params of the mean accuracy over folds."""
    means = results.groupby(["method", "repetition", "params"], sort=True)["accuracy"].mean().reset_index()
    best = means.loc[means.groupby(["method", "repetition"], sort=True)["accuracy"].idxmax()]
    return best.rename(columns={"accuracy": "best_accuracy"}).reset_index(drop=True)


def summarize_bench(results: pd.DataFrame) -> pd.DataFrame:
    """Best-tuned and normalized accuracy per method, mean and standard error over repetitions."""
    best = best_tuned(results)
    reference = best[best["method"] == "knn"].set_index("repetition")["best_accuracy"]
    if len(reference):
        best["normalized_accuracy"] = [
            normalized_accuracy(row.best_accuracy, reference[row.repetition]) for row in best.itertuples()
        ]
    else:
        best["normalized_accuracy"] = np.nan
    rows = []
    for method, group in best.groupby("method", sort=True):
        rows.append(
            {
                "method": method,
                "repetitions": len(group),
                "best_accuracy_mean": group["best_accuracy"].mean(),
                "best_accuracy_se": _standard_error(group["best_accuracy"]),
                "normalized_accuracy_mean": group["normalized_accuracy"].mean(),
                "normalized_accuracy_se": _standard_error(group["normalized_accuracy"]),
            }
        )
    return pd.DataFrame(rows)


def cmd_bench(config: ExperimentConfig) -> RunArtifacts:
    """Compare FlyNN with kNN, 1NN and SBFC by k-fold cross-validation over the hyper-parameter grid.

    Folds are fixed per dataset seed and shared by every method. Each method's
    best-tuned accuracy is its maximum over the grid of the mean fold accuracy,
    normalized against the best-tuned kNN accuracy of the same repetition.

    Parameters:
    config : ExperimentConfig
        A validated 'bench' configuration.

    Returns:
    RunArtifacts
        The results table (one row per method, params, fold and repetition)
        and the per-method summary.
    """
    experiment_id = f"bench-{config.seed}"
    repetitions = 1 if config.dry_run else config.repetitions
    logger.info(f"[STARTED] 'bench' workflow: {repetitions} repetitions, methods {list(config.methods)}")
    records = []
    grid = None
    for repetition in range(repetitions):
        data_seed = derive_seed(config.seed, repetition)
        dataset = resolve_dataset(config, data_seed)
        if grid is None:
            grid = sample_hash_grid(config, dataset.d)
            grid = grid[:1] if config.dry_run else grid
        folds = kfold(dataset, config.folds, derive_seed(data_seed, 1))
        folds = folds[:1] if config.dry_run else folds
        for fold, (train_set, test_set) in enumerate(folds):
            tasks = _bench_tasks(config, train_set, test_set, grid, derive_seed(data_seed, 2, fold))
            outputs = run_tasks(_call, [(fn, args) for _, fn, args in tasks], config.workers)
            for (method, _, args), output in zip(tasks, outputs):
                records.extend(_bench_records(config, experiment_id, method, args, output, repetition, fold, data_seed))
        logger.debug(f"\trepetition {repetition} done ({len(records)} records)")

    results = pd.DataFrame([asdict(record) for record in records], columns=RESULT_COLUMNS)
    summary = summarize_bench(results) if len(results) else pd.DataFrame()
    if "knn" in config.methods and len(results):
        reference = best_tuned(results).query("method == 'knn'").set_index("repetition")["best_accuracy"]
        for record in records:
            record.normalized_accuracy = normalized_accuracy(record.accuracy, reference[record.repetition])

    paths = {
        "results": Path(config.output),
        "summary": artifact_path(config.output, "_summary.csv"),
        "manifest": artifact_path(config.output, ".manifest.json"),
    }
    results = write_results(records, paths["results"])
    summary.to_csv(paths["summary"], index=False)
    write_manifest(config, paths["manifest"], experiment_id=experiment_id, grid=grid)
    if len(summary):
        print(summary.to_string(index=False))
    logger.info(f"[DONE] 'bench' workflow: {len(records)} records written to {paths['results']}")
    return RunArtifacts(results, summary, paths)


def sweep_settings(config: ExperimentConfig, d: int) -> list:
    """(axis, hash setting, gammas) triples: every axis's values against the base values of the others."""
    sweep = config.sweep

    def pick(values, swept: bool):
        return values[:1] if swept and config.dry_run else values

    def s_of(ratio: float) -> int:
        return min(d, max(1, round(ratio * d)))

    settings = []
    for axis in sweep.axes:
        ms = [max(1, round(r * d)) for r in pick(sweep.m_over_d, True)] if axis == "m" else sweep.base_m
        ss = [s_of(r) for r in (pick(sweep.s_over_d, True) if axis == "s" else sweep.base_s_over_d)]
        rhos = pick(sweep.rho, True) if axis == "rho" else sweep.base_rho
        gammas = pick(sweep.gamma, True) if axis == "gamma" else sweep.base_gamma
        seen = set()
        for m, s, rho in product(ms, ss, rhos):
            if rho > m:
                logger.info(f"[SKIPPED] {axis} axis: rho={rho} exceeds m={m}")
                continue
            if (m, s, rho) in seen:
                continue
            seen.add((m, s, rho))
            settings.append((axis, {"m": m, "s": s, "rho": rho}, tuple(gammas)))
    return settings


def hp_curve(results: pd.DataFrame) -> pd.DataFrame:
    """Accuracy mean and standard error over folds and repetitions for every point of every axis."""
    keys = ["axis", "m", "s", "rho", "gamma"]
    params = pd.DataFrame([{k: json.loads(p)[k] for k in keys} for p in results["params"]], columns=keys)
    table = pd.concat([params, results[["accuracy"]].reset_index(drop=True)], axis=1)
    curve = (
        table.groupby(keys, sort=True)["accuracy"]
        .agg(accuracy_mean="mean", accuracy_se=_standard_error, evaluations="count")
        .reset_index()
    )
    curve.insert(1, "value", [float(row[row["axis"]]) for _, row in curve.iterrows()])
    return curve


def cmd_hp_sweep(config: ExperimentConfig) -> RunArtifacts:
    """Cross-validated FlyNN accuracy as each of m, s, rho and gamma varies with the others fixed.

    Folds are fixed per dataset seed. One hashing pass per (m, s, rho) serves
    every gamma of that setting.

    Parameters:
    config : ExperimentConfig
        A validated 'hp-sweep' configuration.

    Returns:
    RunArtifacts
        The results table (one row per axis, setting, gamma, fold and
        repetition) and the per-axis curve.
    """
    experiment_id = f"hp-sweep-{config.seed}"
    repetitions = 1 if config.dry_run else config.repetitions
    logger.info(f"[STARTED] 'hp-sweep' workflow: axes {list(config.sweep.axes)}, {repetitions} repetitions")
    records = []
    settings = None
    for repetition in range(repetitions):
        data_seed = derive_seed(config.seed, repetition)
        dataset = resolve_dataset(config, data_seed)
        if settings is None:
            settings = sweep_settings(config, dataset.d)
        folds = kfold(dataset, config.folds, derive_seed(data_seed, 1))
        folds = folds[:1] if config.dry_run else folds
        for fold, (train_set, test_set) in enumerate(folds):
            arguments = [
                (train_set, test_set, setting, derive_seed(data_seed, 2, fold, index), gammas)
                for index, (_, setting, gammas) in enumerate(settings)
            ]
            outputs = run_tasks(_flynn_task, arguments, config.workers)
            for (axis, setting, _), args, output in zip(settings, arguments, outputs):
                for gamma, acc, balanced, seconds in output:
                    records.append(
                        ResultRecord(
                            experiment_id,
                            "flynn",
                            encode_params(axis=axis, gamma=gamma, **setting),
                            repetition,
                            fold=fold,
                            seed=args[3],
                            accuracy=acc,
                            balanced_accuracy=balanced,
                            wall_time=seconds if config.record_timings else None,
                        )
                    )
        logger.debug(f"\trepetition {repetition} done ({len(records)} records)")

    paths = {
        "results": Path(config.output),
        "summary": artifact_path(config.output, "_curve.csv"),
        "manifest": artifact_path(config.output, ".manifest.json"),
    }
    results = write_results(records, paths["results"])
    summary = hp_curve(results)
    summary.to_csv(paths["summary"], index=False)
    write_manifest(config, paths["manifest"], experiment_id=experiment_id, settings=settings)
    print(summary.to_string(index=False))
    logger.info(f"[DONE] 'hp-sweep' workflow: {len(records)} records written to {paths['results']}")
    return RunArtifacts(results, summary, paths)


def speedup_table(timings: pd.DataFrame) -> pd.DataFrame:
    """Mean and sd of training time and of the speedup over tau = 1, per tau."""
    baseline = timings[timings["parties"] == 1].set_index("repetition")["seconds"]
    timings = timings.assign(speedup=[baseline[r] / t for r, t in zip(timings["repetition"], timings["seconds"])])
    table = timings.groupby("parties", sort=True).agg(
        seconds_mean=("seconds", "mean"),
        seconds_sd=("seconds", "std"),
        speedup_mean=("speedup", "mean"),
        speedup_sd=("speedup", "std"),
    )
    return table.fillna(0.0).reset_index()


def cmd_scale(config: ExperimentConfig) -> RunArtifacts:
    """Time federated training for every party count and report the speedup over one party.

    The measured time of a run is its slowest party's local training; seed
    broadcast and aggregation are metered for bytes but not timed.
    """
    parties = sorted(set(config.federation.parties) | {1})
    cores = os.cpu_count() or 1
    if cores < max(parties):
        logger.warning(f"[WARNING] {cores} cores for up to {max(parties)} parties; speedups will be understated")
    logger.info(f"[STARTED] 'scale' workflow: parties {parties}, {config.repetitions} repetitions")
    experiment_id = f"scale-{config.seed}"
    fl = config.flynn
    dataset = resolve_dataset(config, config.seed)
    params = HashParams(fl.m[0], fl.s, fl.rho[0], derive_seed(config.seed, 1))
    params.check_dimension(dataset.d)

    records, timings = [], []
    for repetition in range(config.repetitions):
        for tau in parties:
            plan = FederationPlan(
                shards=tuple(shard(dataset, tau, config.federation.shard_policy)),
                params=params,
                gamma=fl.gamma,
                transport=config.federation.transport,
                backend=config.federation.backend,
                timeout=config.federation.timeout,
            )
            result = train_flynn_fl(plan)
            report = comm_report(result)
            seconds = result.train_seconds
            timings.append({"parties": tau, "repetition": repetition, "seconds": seconds})
            records.append(
                ResultRecord(
                    experiment_id,
                    "flynn-fl",
                    encode_params(parties=tau, m=params.m, s=params.s, rho=params.rho, gamma=fl.gamma),
                    repetition,
                    seed=params.seed,
                    wall_time=seconds if config.record_timings else None,
                    bytes_sent=report.total_bytes_sent,
                    bytes_received=int(report.parties["bytes_received"].sum()),
                )
            )
            logger.debug(f"\ttau={tau} repetition={repetition}: {seconds:.3f}s")

    summary = speedup_table(pd.DataFrame(timings))
    paths = {
        "results": Path(config.output),
        "summary": artifact_path(config.output, "_speedup.csv"),
        "manifest": artifact_path(config.output, ".manifest.json"),
    }
    results = write_results(records, paths["results"])
    summary.to_csv(paths["summary"], index=False)
    write_manifest(config, paths["manifest"], experiment_id=experiment_id, cpu_count=cores)
    print(summary.to_string(index=False))
    logger.info(f"[DONE] 'scale' workflow: speedup table written to {paths['summary']}")
    return RunArtifacts(results, summary, paths)


def _dp_task(m: int, rho: int, epsilon, T, dp_seed: int) -> dict:
    shared = _SHARED
    params = HashParams(m, shared["s"], rho, shared["hash_seeds"][(m, rho)])
    plan = FederationPlan(
        shards=shared["shards"],
        params=params,
        gamma=shared["gamma"],
        dp=DPParams(epsilon, T) if epsilon is not None else None,
        dp_seed=dp_seed,
        transport=shared["transport"],
        backend=shared["backend"],
        timeout=shared["timeout"],
    )
    with stopwatch() as clock:
        result = train_flynn_fl(plan)
    test_set = shared["test"]
    predicted = predict(result.model, test_set.X)
    report = comm_report(result)
    return {
        "accuracy": float(np.mean(predicted == test_set.y)),
        "balanced_accuracy": balanced_accuracy(test_set.y, predicted),
        "seconds": clock["seconds"],
        "bytes_sent": report.total_bytes_sent,
        "bytes_received": int(report.parties["bytes_received"].sum()),
    }


def dp_curve(results: pd.DataFrame) -> pd.DataFrame:
    """Per (m, rho, epsilon): accuracy mean and standard error for every T, and the best T."""
    keys = ("m", "rho", "epsilon", "T")
    params = pd.DataFrame([{k: json.loads(p)[k] for k in keys} for p in results["params"]], columns=keys)
    table = pd.concat([params, results[["repetition", "accuracy"]].reset_index(drop=True)], axis=1)
    baseline = table[table["epsilon"].isna()].groupby(["m", "rho"])["accuracy"].mean()
    private = table[table["epsilon"].notna()]
    grid = (
        private.groupby(["m", "rho", "epsilon", "T"], sort=True)["accuracy"]
        .agg(accuracy_mean="mean", accuracy_se=_standard_error)
        .reset_index()
    )
    best = grid.loc[grid.groupby(["m", "rho", "epsilon"], sort=True)["accuracy_mean"].idxmax()].copy()
    best["best"] = True
    grid = grid.merge(best[["m", "rho", "epsilon", "T", "best"]], how="left", on=["m", "rho", "epsilon", "T"])
    grid["best"] = grid["best"].eq(True)
    grid["non_dp_accuracy"] = [baseline.get((m, rho), np.nan) for m, rho in zip(grid["m"], grid["rho"])]
    return grid


def cmd_dp_sweep(config: ExperimentConfig) -> RunArtifacts:
    """Accuracy of private federated FlyNN over (epsilon, T), with a non-private baseline per setting.

    The synthetic data is split once into a training set, sharded among the
    parties, and a held-out test set of `dataset.test_size` rows. Every
    private run records the seed that drives its mechanism.
    """
    fl, federation = config.flynn, config.federation
    tau = federation.parties[0]
    experiment_id = f"dp-sweep-{config.seed}"
    logger.info(
        f"[STARTED] 'dp-sweep' workflow: tau={tau}, epsilon {list(config.dp.epsilon)}, T {list(config.dp.T)}"
    )
    dataset = resolve_dataset(config, config.seed, extra_rows=config.dataset.test_size)
    train_set, test_set = train_test_split(dataset, config.dataset.test_size, derive_seed(config.seed, 1))
    shards = tuple(shard(train_set, tau, federation.shard_policy))
    settings = list(product(fl.m, fl.rho))
    hash_seeds = {(m, rho): derive_seed(config.seed, 2, m, rho) for m, rho in settings}

    jobs = []
    for m, rho in settings:
        jobs.append((m, rho, None, None, 0))
        for (e_index, epsilon), T in product(enumerate(config.dp.epsilon), config.dp.T):
            if T > m * dataset.L:
                logger.info(f"[SKIPPED] T={T} exceeds m*L={m * dataset.L} for m={m}")
                continue
            for repetition in range(config.repetitions):
                jobs.append((m, rho, epsilon, T, derive_seed(config.seed, 3, m, rho, e_index, T, repetition)))

    shared = {
        "shards": shards,
        "test": test_set,
        "s": fl.s,
        "gamma": fl.gamma,
        "hash_seeds": hash_seeds,
        "transport": federation.transport,
        "backend": federation.backend,
        "timeout": federation.timeout,
    }
    outputs = run_tasks(_dp_task, jobs, config.workers, initializer=_share, initargs=(shared,))
    records = []
    repetition_of = {}
    for (m, rho, epsilon, T, dp_seed), output in zip(jobs, outputs):
        key = (m, rho, epsilon, T)
        repetition = repetition_of.get(key, 0)
        repetition_of[key] = repetition + 1
        records.append(
            ResultRecord(
                experiment_id,
                "flynn-dp" if epsilon is not None else "flynn-fl",
                encode_params(m=m, s=fl.s, rho=rho, gamma=fl.gamma, parties=tau, epsilon=epsilon, T=T, hash_seed=hash_seeds[(m, rho)]),
                repetition,
                seed=dp_seed if epsilon is not None else hash_seeds[(m, rho)],
                accuracy=output["accuracy"],
                balanced_accuracy=output["balanced_accuracy"],
                wall_time=output["seconds"] if config.record_timings else None,
                bytes_sent=output["bytes_sent"],
                bytes_received=output["bytes_received"],
            )
        )

    paths = {
        "results": Path(config.output),
        "summary": artifact_path(config.output, "_curve.csv"),
        "manifest": artifact_path(config.output, ".manifest.json"),
    }
    results = write_results(records, paths["results"])
    summary = dp_curve(results)
    summary.to_csv(paths["summary"], index=False)
    write_manifest(config, paths["manifest"], experiment_id=experiment_id, hash_seeds={f"{m},{r}": s for (m, r), s in hash_seeds.items()})
    print(summary[summary["best"]].to_string(index=False))
    logger.info(f"[DONE] 'dp-sweep' workflow: {len(records)} records written to {paths['results']}")
    return RunArtifacts(results, summary, paths)


def cmd_train(config: ExperimentConfig, model_path=None) -> Path:
    """Train one model on the configured dataset and write it to `model_path`.

    With more than one party in `federation.parties` the model is trained
    federatedly on round-robin or by-class shards; the result is the same model.
    """
    fl = config.flynn
    dataset = resolve_dataset(config, config.seed)
    params = HashParams(fl.m[0], fl.s, fl.rho[0], config.seed)
    tau = config.federation.parties[0]
    logger.info(f"[STARTED] 'train' workflow: n={dataset.n}, d={dataset.d}, m={params.m}, tau={tau}")
    if tau > 1:
        plan = FederationPlan(
            shards=tuple(shard(dataset, tau, config.federation.shard_policy)),
            params=params,
            gamma=fl.gamma,
            transport=config.federation.transport,
            backend=config.federation.backend,
            timeout=config.federation.timeout,
        )
        model = train_flynn_fl(plan).model
    else:
        model = train(dataset, params, fl.gamma)
    path = save_model(model, model_path or config.model_path)
    logger.info(f"[DONE] 'train' workflow: training accuracy {accuracy(model, dataset):.4f}, model written to {path}")
    return path


def cmd_infer(model_path, data_path, output, has_header: bool = True, label_column=None) -> pd.DataFrame:
    """Score every row of a CSV with a saved model and write the predictions CSV.

    Columns are row_id, predicted_label and one score_<label> column per class.
    """
    model = load_model(model_path)
    X, _ = read_feature_matrix(data_path, has_header, drop_column=label_column)
    logger.info(f"[STARTED] 'infer' workflow: {X.shape[0]} rows, model m={model.m}, d={model.d}")
    scores = novelty_scores_batch(model, X)
    predictions = pd.DataFrame(
        {"row_id": np.arange(X.shape[0]), "predicted_label": [model.labels[i] for i in np.argmin(scores, axis=1)]}
    )
    for index, label in enumerate(model.labels):
        predictions[f"score_{label}"] = scores[:, index]
    output = Path(output)
    output.parent.mkdir(parents=True, exist_ok=True)
    predictions.to_csv(output, index=False)
    logger.info(f"[DONE] 'infer' workflow: predictions written to {output}")
    return predictions


def cmd_fetch(url: str, cache_dir=None) -> Path:
    path = fetch_dataset(url, cache_dir)
    print(path)
    return path
