"""Held-out-domain evaluation and the ablation-matrix runner."""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .config import RunConfig, apply_overrides, format_value
from .datakit import MultiDomainDataset, generate_synthetic, load_directory, make_split
from .trainer import EnsembleModel, TrainResult, accuracy, ensemble_predict, train


class LeakageError(AssertionError):
    """A target-domain sample reached a gradient step."""


@dataclass
class Metrics:
    per_domain: dict[int, float]
    seed: int | None = None
    config_hash: str = ""
    counts: dict[int, int] = field(default_factory=dict)

    @property
    def average(self) -> float:
        return float(np.mean(list(self.per_domain.values())))

    def to_json(self) -> dict:
        return {
            "per_domain": {str(k): v for k, v in self.per_domain.items()},
            "counts": {str(k): v for k, v in self.counts.items()},
            "average": self.average,
            "seed": self.seed,
            "config_hash": self.config_hash,
        }


def evaluate(ensemble: EnsembleModel | Callable[[np.ndarray], np.ndarray], dataset: MultiDomainDataset,
             target_domain: int, seed: int | None = None, config_hash: str = "") -> Metrics:
    """Top-1 accuracy of the ensemble's argmax over every sample of the target domain."""
    ids = dataset.domain_indices(target_domain)
    if len(ids) == 0:
        raise ValueError(f"target domain {target_domain} has no samples")
    images = dataset.images[ids]
    probs = ensemble(images) if callable(ensemble) else ensemble_predict(ensemble, images)
    acc = accuracy(np.asarray(probs), dataset.labels[ids])
    return Metrics({target_domain: acc}, seed, config_hash, {target_domain: len(ids)})


def dataset_for(config: RunConfig) -> MultiDomainDataset:
    if config.data_dir:
        return load_directory(config.data_dir, image_size=config.image_size)
    return generate_synthetic(config.classes, config.per_domain, config.image_size, config.data_seed)


@dataclass
class RunOutcome:
    config: RunConfig
    result: TrainResult
    metrics: Metrics
    target_ids: np.ndarray

    def check_no_leakage(self) -> None:
        leaked = self.result.touched.intersection(self.target_ids.tolist())
        if leaked:
            raise LeakageError(f"{len(leaked)} target-domain ids reached training, e.g. {sorted(leaked)[:5]}")


def run_experiment(config: RunConfig, dataset: MultiDomainDataset, progress=None) -> RunOutcome:
    """Split, train, check the batch trace against the target domain, evaluate."""
    config.validate()
    split = make_split(dataset, config.target_domain, config.val_fraction, config.seed)
    result = train(config, dataset, split, progress)
    metrics = evaluate(result.ensemble, dataset, config.target_domain, config.seed, config.digest())
    outcome = RunOutcome(config, result, metrics, dataset.domain_indices(config.target_domain))
    outcome.check_no_leakage()
    return outcome


# ---------------------------------------------------------------------------
# ablation matrices

@dataclass(frozen=True)
class AblationCell:
    name: str
    overrides: dict[str, str]
    reference: float | None = None  # published Digits-DG average accuracy, annotation only


_FLAGS = ("ereplay_b", "esaug", "ereplay_d")


def _flags(b: bool, s: bool, d: bool, **extra) -> dict[str, str]:
    out = {k: format_value(v) for k, v in zip(_FLAGS, (b, s, d))}
    out.update({k: format_value(v) for k, v in extra.items()})
    return out


MATRICES: dict[str, tuple[str, list[AblationCell]]] = {
    "components": ("Effectiveness of each component", [
        AblationCell("Vanilla", _flags(False, False, False, supcon=False, color_jitter=0.0), 73.7),
        AblationCell("Baseline-jitter", _flags(False, False, False, supcon=False), 77.12),
        AblationCell("Baseline", _flags(False, False, False), 77.86),
        AblationCell("Model a", _flags(True, False, False), 81.9),
        AblationCell("Model b", _flags(False, True, False), 82.12),
        AblationCell("Model c", _flags(False, False, True), 80.60),
        AblationCell("Model d", _flags(True, True, False), 85.43),
        AblationCell("Model e", _flags(False, True, True), 85.26),
        AblationCell("Model f", _flags(True, False, True), 83.21),
        AblationCell("TripleE", _flags(True, True, True), 86.97),
    ]),
    "flags": ("Baseline vs. batch replay vs. full method", [
        AblationCell("Baseline", _flags(False, False, False), 77.86),
        AblationCell("EReplayB only", _flags(True, False, False), 81.9),
        AblationCell("TripleE", _flags(True, True, True), 86.97),
    ]),
    "esaug": ("Augmentation type and list", [
        AblationCell("StandardAug (cascade, A)", {"cross_mode": "none", "cascade": "2"}, 82.52),
        AblationCell("TrivialAug (singular, A)", {"cross_mode": "none"}, 86.33),
        AblationCell("TripleE-Style (singular, A')", {"cross_mode": "style"}, 86.97),
        AblationCell("TripleE-Fourier (singular, A')", {"cross_mode": "fourier"}, 87.04),
    ]),
    "m": ("Number of sub-datasets", [
        AblationCell(f"m={m}", {"m": str(m), "ereplay_d": format_value(m > 1)}, ref)
        for m, ref in zip(range(1, 6), (85.43, 85.50, 86.97, 85.76, 85.16))
    ]),
    "ensemble": ("Dataset replay vs. traditional ensemble", [
        AblationCell("Traditional ensemble", {"ensemble": "traditional", "m": "3"}, 85.64),
        AblationCell("EReplayD", {"ensemble": "partition", "m": "3"}, 86.97),
    ]),
    "br": ("Batch size and replay count", [
        AblationCell(f"b={b},r={r}", {"b": str(b), "r": str(r)}, ref)
        for (b, r), ref in zip(((4, 32), (4, 16), (4, 8), (4, 4), (8, 4), (16, 4), (32, 4)),
                               (86.05, 86.32, 86.07, 87.04, 86.02, 86.03, 85.52))
    ]),
    "augprob": ("Probability of the cross-image op", [
        AblationCell("Fourier p=1/2", {"cross_mode": "fourier", "cross_prob": "0.5"}, 84.96),
        AblationCell("Style p=1/2", {"cross_mode": "style", "cross_prob": "0.5"}, 84.76),
        AblationCell("Fourier p=1/15", {"cross_mode": "fourier"}, 86.97),
        AblationCell("Style p=1/15", {"cross_mode": "style"}, 87.04),
    ]),
    "crossmix": ("Combining Fourier and style mixing", [
        AblationCell("Fourier + Style", {"cross_mode": "both"}, 86.76),
        AblationCell("Fourier", {"cross_mode": "fourier"}, 86.97),
        AblationCell("Style", {"cross_mode": "style"}, 87.04),
    ]),
}


def load_matrix(spec: str) -> tuple[str, list[AblationCell]]:
    """A built-in matrix name, or a file of lines ``name: key=value key=value``."""
    if spec in MATRICES:
        return MATRICES[spec]
    path = Path(spec)
    if not path.is_file():
        raise ValueError(f"unknown matrix {spec!r}; built-ins: {', '.join(MATRICES)}")
    cells = []
    for line in path.read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        name, _, rest = line.partition(":")
        overrides = dict(tok.split("=", 1) for tok in rest.split())
        cells.append(AblationCell(name.strip(), overrides))
    return path.stem, cells


_WORKER_DATA: MultiDomainDataset | None = None


def _init_worker(dataset):
    global _WORKER_DATA
    _WORKER_DATA = dataset


def _run_job(job):
    cell_name, config = job
    try:
        outcome = run_experiment(config, _WORKER_DATA)
    except Exception as exc:  # a failing cell must not stop the matrix
        return {"cell": cell_name, "seed": config.seed, "target": config.target_domain,
                "error": f"{type(exc).__name__}: {exc}"}
    target = set(outcome.target_ids.tolist())
    trace = outcome.result.trace
    traced = sum(len(target.intersection(s.anchors + s.partners)) for s in trace)
    return {"cell": cell_name, "seed": config.seed, "target": config.target_domain,
            "acc": outcome.metrics.per_domain[config.target_domain],
            "val_acc": outcome.result.ensemble.best_val_acc, "config_hash": config.digest(),
            "trace_steps": len(trace), "trace_target_ids": traced}


def worker_count() -> int:
    env = os.environ.get("TRIPLEE_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def run_jobs(jobs: list[tuple[str, RunConfig]], dataset: MultiDomainDataset, workers: int | None = None,
             on_result: Callable[[dict], None] | None = None) -> list[dict]:
    workers = worker_count() if workers is None else workers
    results = []
    if workers <= 1:
        _init_worker(dataset)
        for job in jobs:
            results.append(_run_job(job))
            if on_result:
                on_result(results[-1])
        return results
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(dataset,)) as pool:
        for rec in pool.map(_run_job, jobs):
            results.append(rec)
            if on_result:
                on_result(rec)
    return results


@dataclass
class AblationReport:
    title: str
    cells: list[AblationCell]
    targets: list[int]
    seeds: list[int]
    records: list[dict]
    domain_names: tuple[str, ...] = ()

    def accuracies(self, cell: str, target: int) -> dict[int, float]:
        return {r["seed"]: r["acc"] for r in self.records
                if r["cell"] == cell and r["target"] == target and "acc" in r}

    def cell_average_by_seed(self, cell: str) -> dict[int, float]:
        out = {}
        for seed in self.seeds:
            accs = [self.accuracies(cell, t).get(seed) for t in self.targets]
            if all(a is not None for a in accs):
                out[seed] = float(np.mean(accs))
        return out

    def summary(self, cell: str, target: int | None = None) -> tuple[float, float]:
        values = list((self.cell_average_by_seed(cell) if target is None
                       else self.accuracies(cell, target)).values())
        if not values:
            return math.nan, math.nan
        return float(np.mean(values)), float(np.std(values))

    def paired_deltas(self, cell: str, reference: str) -> list[float]:
        """Per (target, seed) accuracy differences ``cell - reference``."""
        deltas = []
        for t in self.targets:
            a, b = self.accuracies(cell, t), self.accuracies(reference, t)
            deltas += [a[s] - b[s] for s in self.seeds if s in a and s in b]
        return deltas

    def failures(self) -> list[dict]:
        return [r for r in self.records if "error" in r]

    def _domain_label(self, t: int) -> str:
        return self.domain_names[t] if t < len(self.domain_names) else f"domain{t}"

    def to_csv(self) -> str:
        head = ["cell"] + [self._domain_label(t) for t in self.targets] + ["avg", "avg_std", "published_ref"]
        lines = [",".join(head)]
        for cell in self.cells:
            row = [cell.name] + [f"{self.summary(cell.name, t)[0]:.2f}" for t in self.targets]
            mean, std = self.summary(cell.name)
            row += [f"{mean:.2f}", f"{std:.2f}", "" if cell.reference is None else f"{cell.reference:.2f}"]
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"

    def to_markdown(self) -> str:
        names = [self._domain_label(t) for t in self.targets]
        out = [f"## {self.title}", "", f"seeds: {', '.join(map(str, self.seeds))}", "",
               "| cell | " + " | ".join(names) + " | Avg. | published reference (Digits-DG avg.) |",
               "|---" * (len(names) + 3) + "|"]
        for cell in self.cells:
            vals = []
            for t in self.targets:
                mean, std = self.summary(cell.name, t)
                vals.append(f"{mean:.2f} ± {std:.2f}")
            mean, std = self.summary(cell.name)
            ref = "" if cell.reference is None else f"{cell.reference:.2f}"
            out.append(f"| {cell.name} | " + " | ".join(vals) + f" | {mean:.2f} ± {std:.2f} | {ref} |")
        if len(self.cells) > 1:
            ref_cell = self.cells[0].name
            out += ["", f"Paired per-(target, seed) deltas against '{ref_cell}':", ""]
            for cell in self.cells[1:]:
                d = self.paired_deltas(cell.name, ref_cell)
                if d:
                    wins = sum(x > 0 for x in d)
                    losses = sum(x < 0 for x in d)
                    out.append(f"- {cell.name}: mean {np.mean(d):+.2f}, +{wins} / -{losses} / ={len(d) - wins - losses}")
        if self.failures():
            out += ["", "Failed runs:", ""] + [f"- {r['cell']} seed={r['seed']} target={r['target']}: {r['error']}"
                                              for r in self.failures()]
        out.append("")
        out.append("Published reference numbers are full-scale Digits-DG results, shown for orientation only.")
        return "\n".join(out) + "\n"


def run_ablation(matrix: str | tuple[str, list[AblationCell]], seeds: list[int], base: RunConfig,
                 dataset: MultiDomainDataset, targets: list[int] | None = None, workers: int | None = None,
                 on_result: Callable[[dict], None] | None = None) -> AblationReport:
    """Train and evaluate every (cell, seed, target) combination."""
    title, cells = load_matrix(matrix) if isinstance(matrix, str) else matrix
    targets = list(range(dataset.domain_count)) if targets is None else list(targets)
    jobs = []
    for cell in cells:
        cfg = apply_overrides(base, cell.overrides)
        for seed in seeds:
            for t in targets:
                jobs.append((cell.name, cfg.replace(seed=seed, target_domain=t)))
    records = run_jobs(jobs, dataset, workers, on_result)
    return AblationReport(title, cells, targets, list(seeds), records, dataset.domain_names)


def write_jsonl(path: Path, rows) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")

