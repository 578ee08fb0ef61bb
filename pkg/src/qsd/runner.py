"""Seed-matched multi-condition training runs and their result files.

Output directory layout::

    effective_config.ini     every setting after defaults and presets
    runs/<label>__seed<s>.csv    per-epoch metrics of one run
    runs/<label>__seed<s>.json   completion marker (divergence, wall time)
    snapshots/<label>__seed<s>.qsdw
    metrics.csv              all runs concatenated in config order
    probe.csv, params.csv, histograms.csv   (when probing is enabled)
    summary.json

Each run derives its random streams from its seed alone: stream 0 for
weight initialisation, 1 for data shuffling, 2 for dilution draws, 3 for
probing with masks on and 4 for the pixel permutation.  Conditions therefore
share initial weights and data order for a given seed.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import Condition, ExperimentConfig
from .dataio import Dataset, batches, load_idx, permute_pixels
from .errors import DataFormatError, NumericError
from .labstats import (
    REGIMES,
    RunRecord,
    activation_summary,
    final_metric,
    histogram,
    median_iqr,
    rank_sum_test,
    shared_param_ranges,
    value_range,
)
from .netcore import (
    MNIST_WIDTHS,
    MlpModel,
    OptimizerState,
    backward,
    forward,
    init_variance_scaling,
    load_snapshot,
    lr_schedule,
    save_snapshot,
    sgd_momentum_step,
    softmax_cross_entropy,
)
from .stochastics import RngStream

log = logging.getLogger(__name__)

INIT_STREAM, SHUFFLE_STREAM, DILUTION_STREAM, PROBE_STREAM, PERMUTE_STREAM = range(5)
METRIC_COLUMNS = ("condition", "seed", "epoch", "lr", "train_cost", "test_cost", "test_error")
EVAL_CHUNK = 2000


def _fmt(x: float) -> str:
    return repr(float(x))


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def run_name(label: str, seed: int) -> str:
    return f"{label}__seed{seed}"


def load_datasets(config: ExperimentConfig) -> tuple[Dataset, Dataset]:
    for p in (config.train_images, config.train_labels, config.test_images, config.test_labels):
        if not Path(p).is_file():
            raise DataFormatError(f"dataset file not found: {p}", field="path")
    train = load_idx(config.train_images, config.train_labels, "train").subset(config.train_limit)
    test = load_idx(config.test_images, config.test_labels, "test").subset(config.test_limit)
    return train, test


def evaluate(model: MlpModel, dataset: Dataset) -> tuple[float, float]:
    """Mean cost and error rate over a dataset with dilution switched off."""
    cost_sum = 0.0
    err_sum = 0.0
    for start in range(0, len(dataset), EVAL_CHUNK):
        x = dataset.images[start:start + EVAL_CHUNK]
        y = dataset.labels[start:start + EVAL_CHUNK]
        logits, _ = forward(model, x)
        c, e = softmax_cross_entropy(logits, y)
        cost_sum += c * len(y)
        err_sum += e * len(y)
    return cost_sum / len(dataset), err_sum / len(dataset)


def train_run(
    config: ExperimentConfig,
    condition: Condition,
    seed: int,
    train: Dataset,
    test: Dataset,
    widths=MNIST_WIDTHS,
) -> tuple[RunRecord, MlpModel]:
    """One full training run.  Divergence ends the run early and is recorded."""
    start = time.perf_counter()
    init = RngStream(seed, INIT_STREAM)
    shuffle = RngStream(seed, SHUFFLE_STREAM)
    dilution = RngStream(seed, DILUTION_STREAM)
    model = init_variance_scaling(widths, init, condition.dilution)
    state = OptimizerState.for_model(model, config.momentum)
    record = RunRecord(condition.label, seed)

    for epoch in range(config.epochs):
        lr = lr_schedule(epoch, config.learning_rate, config.lr_decay, config.lr_milestones)
        cost_sum = 0.0
        try:
            for x, y in batches(train, config.batch_size, shuffle):
                logits, cache = forward(model, x, dilution)
                cost, _ = softmax_cross_entropy(logits, y)
                if not math.isfinite(cost):
                    raise NumericError("non-finite training cost")
                cost_sum += cost * len(y)
                sgd_momentum_step(model, backward(cache, y), state, lr)
            test_cost, test_error = evaluate(model, test)
            if not math.isfinite(test_cost):
                raise NumericError("non-finite test cost")
        except (NumericError, FloatingPointError) as exc:
            log.warning("%s seed %d diverged in epoch %d: %s", condition.label, seed, epoch, exc)
            record.diverged_at = epoch
            break
        state.epoch = epoch + 1
        record.lr.append(lr)
        record.train_cost.append(cost_sum / len(train))
        record.test_cost.append(test_cost)
        record.test_error.append(test_error)
        log.info(
            "%s seed %d epoch %d: train %.4f test %.4f err %.4f",
            condition.label, seed, epoch, record.train_cost[-1], test_cost, test_error,
        )
    record.wall_time = time.perf_counter() - start
    return record, model


def record_csv(record: RunRecord, header: bool = True) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if header:
        writer.writerow(METRIC_COLUMNS)
    for epoch in range(record.n_epochs):
        writer.writerow([
            record.condition, record.seed, epoch, _fmt(record.lr[epoch]),
            _fmt(record.train_cost[epoch]), _fmt(record.test_cost[epoch]), _fmt(record.test_error[epoch]),
        ])
    return buf.getvalue()


def read_metrics_csv(path: Path) -> list[RunRecord]:
    """Group rows of a metrics CSV back into run records."""
    records: dict[tuple[str, int], RunRecord] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["condition"], int(row["seed"]))
            rec = records.setdefault(key, RunRecord(*key))
            rec.lr.append(float(row["lr"]))
            rec.train_cost.append(float(row["train_cost"]))
            rec.test_cost.append(float(row["test_cost"]))
            rec.test_error.append(float(row["test_error"]))
    return list(records.values())


@dataclass
class _Job:
    config: ExperimentConfig
    condition: Condition
    seed: int


_WORKER_DATA: tuple[Dataset, Dataset] | None = None


def _worker_init(config: ExperimentConfig) -> None:
    global _WORKER_DATA
    _WORKER_DATA = load_datasets(config)


def _execute(job: _Job, data: tuple[Dataset, Dataset] | None = None) -> str:
    train, test = data if data is not None else _WORKER_DATA
    out = Path(job.config.output_dir)
    name = run_name(job.condition.label, job.seed)
    record, model = train_run(job.config, job.condition, job.seed, train, test)
    _atomic_write(out / "runs" / f"{name}.csv", record_csv(record))
    save_snapshot(model, out / "snapshots" / f"{name}.qsdw",
                  {"condition": job.condition.label, "seed": job.seed})
    marker = {
        "condition": job.condition.label,
        "seed": job.seed,
        "epochs": record.n_epochs,
        "diverged_at": record.diverged_at,
        "wall_time": record.wall_time,
    }
    # written last: its presence marks the run as complete
    _atomic_write(out / "runs" / f"{name}.json", json.dumps(marker, indent=1))
    return name


def _is_complete(out: Path, name: str) -> bool:
    return (out / "runs" / f"{name}.json").is_file() and (out / "runs" / f"{name}.csv").is_file()


def run_experiment(config: ExperimentConfig, jobs: int | None = None, resume: bool = False) -> int:
    """Train every (condition, seed) pair, then write the combined results.

    Returns 0 when every run finished, 1 when at least one diverged.
    """
    out = Path(config.output_dir)
    (out / "runs").mkdir(parents=True, exist_ok=True)
    (out / "snapshots").mkdir(exist_ok=True)
    _atomic_write(out / "effective_config.ini", config.to_ini())

    pending = []
    for cond, seed in itertools.product(config.conditions, config.seeds):
        name = run_name(cond.label, seed)
        if resume and _is_complete(out, name):
            log.info("skipping completed run %s", name)
            continue
        pending.append(_Job(config, cond, seed))

    jobs = jobs or config.jobs
    if pending:
        if jobs <= 1:
            data = load_datasets(config)
            for job in pending:
                _execute(job, data)
        else:
            load_datasets(config)  # fail fast on missing files
            with ProcessPoolExecutor(jobs, initializer=_worker_init, initargs=(config,)) as pool:
                for name in pool.map(_execute, pending):
                    log.info("finished %s", name)

    summary = collect_results(config)
    return 1 if summary["failed_runs"] else 0


def _load_runs(config: ExperimentConfig) -> tuple[list[RunRecord], list[dict]]:
    out = Path(config.output_dir)
    records, failed = [], []
    for cond, seed in itertools.product(config.conditions, config.seeds):
        name = run_name(cond.label, seed)
        if not _is_complete(out, name):
            continue
        marker = json.loads((out / "runs" / f"{name}.json").read_text())
        (rec,) = read_metrics_csv(out / "runs" / f"{name}.csv") or [RunRecord(cond.label, seed)]
        rec.diverged_at = marker["diverged_at"]
        rec.wall_time = marker["wall_time"]
        if rec.failed:
            failed.append({"condition": cond.label, "seed": seed, "diverged_at": rec.diverged_at})
        records.append(rec)
    return records, failed


def collect_results(config: ExperimentConfig) -> dict:
    """Write metrics.csv, summary.json and (optionally) probe outputs."""
    out = Path(config.output_dir)
    records, failed = _load_runs(config)
    parts = [",".join(METRIC_COLUMNS) + "\n"]
    parts += [record_csv(r, header=False) for r in records]
    _atomic_write(out / "metrics.csv", "".join(parts))

    summary = summarize_records(config, records)
    summary["failed_runs"] = failed
    if config.probe:
        summary["probe"] = probe_runs(config, [r for r in records if not r.failed])
    _atomic_write(out / "summary.json", json.dumps(summary, indent=1, sort_keys=True))
    return summary


def summarize_records(config: ExperimentConfig, records: list[RunRecord]) -> dict:
    labels = [c.label for c in config.conditions]
    finals: dict[str, dict[str, dict[int, float]]] = {m: {lab: {} for lab in labels} for m in ("train_cost", "test_cost", "test_error")}
    for rec in records:
        if rec.failed or rec.n_epochs < 3:
            continue
        for metric in finals:
            finals[metric][rec.condition][rec.seed] = final_metric(rec, metric)

    conditions = {}
    for lab in labels:
        entry = {"dilution": config.condition(lab).dilution.to_dict()}
        for metric, per_cond in finals.items():
            vals = per_cond[lab]
            entry[metric] = {"per_seed": {str(s): v for s, v in sorted(vals.items())}}
            if vals:
                med, q1, q3 = median_iqr(list(vals.values()))
                entry[metric].update({"median": med, "q1": q1, "q3": q3})
        conditions[lab] = entry

    comparisons = []
    for a, b in itertools.combinations(labels, 2):
        for metric, per_cond in finals.items():
            va, vb = list(per_cond[a].values()), list(per_cond[b].values())
            if len(va) < 2 or len(vb) < 2:
                continue
            res = rank_sum_test(va, vb)
            comparisons.append({"a": a, "b": b, "metric": metric, "z": res.z, "p": res.p, "u": res.u})
    return {"conditions": conditions, "comparisons": comparisons, "final_epochs": 3}


def probe_runs(config: ExperimentConfig, records: list[RunRecord]) -> dict:
    """Activation and parameter statistics of the final models.

    Writes probe.csv (per run, regime and layer: mean and sample std of the
    hidden outputs), params.csv (per run and layer parameter medians) and
    histograms.csv (first-seed histograms on shared bins).
    """
    out = Path(config.output_dir)
    _, test = load_datasets(config)
    permuted_by_seed = {}
    probe_rows, param_rows = [], []
    first_seed = config.seeds[0]
    hist_inputs: dict[tuple[str, int, str], dict[str, np.ndarray]] = {}
    models: dict[str, MlpModel] = {}

    for rec in records:
        model, _ = load_snapshot(out / "snapshots" / f"{run_name(rec.condition, rec.seed)}.qsdw")
        if rec.seed not in permuted_by_seed:
            permuted_by_seed[rec.seed] = permute_pixels(
                test, RngStream(rec.seed, PERMUTE_STREAM), shared=config.permutation == "shared"
            )
        permuted = permuted_by_seed[rec.seed]
        for regime in REGIMES:
            if regime == "masks_on":
                summ = activation_summary(model, test, regime, RngStream(rec.seed, PROBE_STREAM))
            elif regime == "masks_off":
                summ = activation_summary(model, test, regime)
            else:
                # pre-permuted so every condition sees the same shuffled pixels
                summ = activation_summary(model, permuted, "masks_off")
                summ.regime = regime
            for row in summ.to_rows():
                probe_rows.append({"condition": rec.condition, "seed": rec.seed, **row})
            if rec.seed == first_seed:
                for i, layer in enumerate(summ.layers):
                    key = (regime, i + 1)
                    hist_inputs.setdefault(key + ("unit_means",), {})[rec.condition] = layer.unit_means
                    hist_inputs.setdefault(key + ("sample_means",), {})[rec.condition] = layer.sample_means
        for i, (w, b) in enumerate(zip(model.weights, model.biases)):
            param_rows.append({
                "condition": rec.condition, "seed": rec.seed, "layer": i + 1,
                "weight_median": float(np.median(w)), "weight_mean": float(w.mean()),
                "weight_std": float(w.std()), "bias_median": float(np.median(b)),
                "bias_mean": float(b.mean()),
            })
        if rec.seed == first_seed:
            models[rec.condition] = model

    _write_rows(out / "probe.csv", probe_rows)
    _write_rows(out / "params.csv", param_rows)

    hist_rows = []
    for (regime, layer, kind), per_cond in sorted(hist_inputs.items()):
        rng = value_range([np.array([0.0])] + list(per_cond.values()))
        for cond, values in per_cond.items():
            hist_rows += _hist_rows(f"{regime}:{kind}", layer, cond, histogram(values, config.probe_bins, rng))
    if models:
        w_ranges, b_ranges = shared_param_ranges(list(models.values()))
        for cond, model in models.items():
            for i in range(len(model.weights)):
                hist_rows += _hist_rows("weights", i + 1, cond, histogram(model.weights[i], config.probe_bins, w_ranges[i]))
                hist_rows += _hist_rows("biases", i + 1, cond, histogram(model.biases[i], config.probe_bins, b_ranges[i]))
    _write_rows(out / "histograms.csv", hist_rows)
    return group_probe_stats(config, probe_rows, param_rows)


def _hist_rows(figure: str, layer: int, condition: str, hist) -> list[dict]:
    return [
        {"figure": figure, "layer": layer, "condition": condition,
         "bin_lo": _fmt(hist.edges[k]), "bin_hi": _fmt(hist.edges[k + 1]), "count": int(hist.counts[k])}
        for k in range(len(hist.counts))
    ]


def _write_rows(path: Path, rows: list[dict]) -> None:
    if not rows:
        _atomic_write(path, "")
        return
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(v) if isinstance(v, float) else v for k, v in row.items()})
    _atomic_write(path, buf.getvalue())


def group_probe_stats(config: ExperimentConfig, probe_rows: list[dict], param_rows: list[dict]) -> dict:
    """Across-seed medians of probe statistics and pairwise rank-sum tests."""
    labels = [c.label for c in config.conditions]

    def collect(rows, value_key, *match):
        out: dict[tuple, dict[str, list[float]]] = {}
        for row in rows:
            key = tuple(row[k] for k in match)
            out.setdefault(key, {}).setdefault(row["condition"], []).append(float(row[value_key]))
        return out

    result: dict[str, list] = {"activations": [], "parameters": []}
    for value_key in ("mean", "sample_std"):
        for (regime, layer), per_cond in sorted(collect(probe_rows, value_key, "regime", "layer").items()):
            entry = {"regime": regime, "layer": layer, "statistic": value_key,
                     "median": {c: median_iqr(v)[0] for c, v in per_cond.items()}, "tests": []}
            for a, b in itertools.combinations([lab for lab in labels if lab in per_cond], 2):
                if len(per_cond[a]) >= 2 and len(per_cond[b]) >= 2:
                    r = rank_sum_test(per_cond[a], per_cond[b])
                    entry["tests"].append({"a": a, "b": b, "z": r.z, "p": r.p})
            result["activations"].append(entry)
    for value_key in ("weight_median", "bias_median"):
        for (layer,), per_cond in sorted(collect(param_rows, value_key, "layer").items()):
            entry = {"layer": layer, "statistic": value_key,
                     "median": {c: median_iqr(v)[0] for c, v in per_cond.items()}, "tests": []}
            for a, b in itertools.combinations([lab for lab in labels if lab in per_cond], 2):
                if len(per_cond[a]) >= 2 and len(per_cond[b]) >= 2:
                    r = rank_sum_test(per_cond[a], per_cond[b])
                    entry["tests"].append({"a": a, "b": b, "z": r.z, "p": r.p})
            result["parameters"].append(entry)
    return result
