"""Two-alternative forced choice evaluation, grid search, ensembling and
video-consistency variance, plus report serialization.

A *scorer* is any callable ``(image_a, image_b) -> float | SimilarityScore``.
By default a :class:`~diffsim.pipeline.PairScorer` is built from the config,
but tests and external baselines can pass their own.
"""

from __future__ import annotations

import csv
import importlib.metadata
import json
import platform
import statistics
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from . import backends
from .aas import SimilarityScore
from .datasets import TripletRecord
from .errors import ConfigError, DiffSimError, TripletError, ValidationError
from .feature_store import FeatureStore
from .sites import MetricConfig

Scorer = Callable[[object, object], Union[float, SimilarityScore]]
ScorerFactory = Callable[[MetricConfig], Scorer]

TIE = -1
REPORT_FORMAT = "diffsim-report/1"
FORMATS = ("json", "csv", "markdown", "plot")
_FORMAT_ALIASES = {"md": "markdown", "png": "plot"}


@dataclass(frozen=True)
class TripletResult:
    triplet_id: str
    score0: Optional[float]
    score1: Optional[float]
    choice: int
    gt_index: int

    @property
    def correct(self) -> bool:
        return self.choice == self.gt_index

    def to_dict(self) -> dict:
        return {"triplet_id": self.triplet_id, "score0": self.score0, "score1": self.score1,
                "choice": self.choice, "gt_index": self.gt_index, "correct": self.correct}

    @classmethod
    def from_dict(cls, d: dict) -> "TripletResult":
        return cls(d["triplet_id"], d["score0"], d["score1"], d["choice"], d["gt_index"])


@dataclass
class BenchmarkReport:
    benchmark: str
    config: Optional[MetricConfig]
    per_triplet: list[TripletResult]
    grid_table: Optional[list[dict]] = None
    environment: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def n_triplets(self) -> int:
        return len(self.per_triplet)

    @property
    def n_correct(self) -> int:
        return sum(r.correct for r in self.per_triplet)

    @property
    def accuracy(self) -> float:
        return self.n_correct / self.n_triplets if self.per_triplet else 0.0

    def choices(self) -> dict[str, int]:
        return {r.triplet_id: r.choice for r in self.per_triplet}

    def to_dict(self) -> dict:
        return {
            "format": REPORT_FORMAT,
            "benchmark": self.benchmark,
            "config": None if self.config is None else self.config.to_dict(),
            "accuracy": self.accuracy,
            "n_correct": self.n_correct,
            "n_triplets": self.n_triplets,
            "per_triplet": [r.to_dict() for r in self.per_triplet],
            "grid_table": self.grid_table,
            "environment": self.environment,
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkReport":
        cfg = None if d.get("config") is None else MetricConfig.from_dict(d["config"])
        return cls(d["benchmark"], cfg, [TripletResult.from_dict(r) for r in d["per_triplet"]],
                   d.get("grid_table"), d.get("environment", {}), d.get("extra", {}))


def _version(dist: str) -> Optional[str]:
    try:
        return importlib.metadata.version(dist)
    except importlib.metadata.PackageNotFoundError:
        return None


def environment_info(configs: Iterable[MetricConfig] = ()) -> dict:
    """Versions, seeds and backend weight fingerprints for a report."""
    configs = list(configs)
    versions = {"python": platform.python_version(), "numpy": np.__version__}
    for dist in ("diffsim", "torch", "diffusers", "transformers"):
        v = _version(dist)
        if v is not None:
            versions[dist] = v
    fingerprints = {}
    for bid in sorted({c.backend_id for c in configs}):
        try:
            fingerprints[bid] = backends.get_backend(bid).fingerprint()
        except DiffSimError:
            fingerprints[bid] = None
    return {
        "versions": versions,
        "platform": sys.platform,
        "noise_seeds": sorted({c.noise_seed for c in configs}),
        "weights": fingerprints,
    }


def _value(s) -> float:
    return float(s.value if isinstance(s, SimilarityScore) else s)


def decide(score0: float, score1: float) -> int:
    """Index of the higher-scoring candidate; exact ties return :data:`TIE`."""
    if score0 > score1:
        return 0
    if score1 > score0:
        return 1
    return TIE


def _default_scorer(config: MetricConfig, store: Optional[FeatureStore]) -> Scorer:
    from .pipeline import PairScorer

    return PairScorer(config, store)


def score_triplets(scorer: Scorer, triplets: Sequence[TripletRecord], jobs: int = 1) -> list[TripletResult]:
    def one(t: TripletRecord) -> TripletResult:
        try:
            s0 = _value(scorer(t.source(t.ref), t.source(t.cand[0])))
            s1 = _value(scorer(t.source(t.ref), t.source(t.cand[1])))
        except (DiffSimError, OSError, ValueError) as e:
            raise TripletError(t.id, e) from e
        return TripletResult(t.id, s0, s1, decide(s0, s1), t.gt_index)

    if jobs <= 1:
        return [one(t) for t in triplets]
    # map keeps input order, so the report does not depend on scheduling
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(one, triplets))


def evaluate_triplets(
    config: MetricConfig,
    triplets: Sequence[TripletRecord],
    scorer: Optional[Scorer] = None,
    *,
    store: Optional[FeatureStore] = None,
    jobs: int = 1,
    benchmark: Optional[str] = None,
) -> BenchmarkReport:
    if not triplets:
        raise ValidationError("no triplets to evaluate")
    scorer = scorer or _default_scorer(config, store)
    results = score_triplets(scorer, triplets, jobs)
    bench = benchmark or _benchmark_of(triplets)
    return BenchmarkReport(bench, config, results, environment=environment_info([config]))


def _benchmark_of(triplets: Sequence[TripletRecord]) -> str:
    names = sorted({t.benchmark for t in triplets})
    return names[0] if len(names) == 1 else "+".join(names) or "unknown"


def default_grid(
    backend_id: str,
    metric_kind: Optional[str] = None,
    *,
    kind: str = "self",
    timesteps: Optional[Iterable[int]] = None,
    resolutions: Optional[Iterable[int]] = None,
    noise_seed: int = 0,
) -> list[MetricConfig]:
    """Every site of ``kind`` crossed with timesteps 100..900 (step 100) for
    diffusion backends, and with ``resolutions`` when given."""
    from .sites import default_metric_kind

    backend = backends.get_backend(backend_id)
    metric_kind = metric_kind or default_metric_kind(backend_id, kind)
    sites = [s for s in backends.list_sites(backend_id) if s.kind == kind]
    if not sites:
        raise ConfigError(f"backend {backend_id!r} has no {kind}-attention sites")
    ts = [None]
    if backend.is_diffusion:
        ts = list(range(100, 1000, 100)) if timesteps is None else list(timesteps)
    res = [backend.default_resolution] if resolutions is None else list(resolutions)
    return [
        MetricConfig(s.with_(timestep=t, resolution=r), metric_kind, noise_seed=noise_seed)
        for s in sites for r in res for t in ts
    ]


def grid_search(
    metric_kind: str,
    grid: Sequence[MetricConfig],
    triplets: Sequence[TripletRecord],
    scorer_factory: Optional[ScorerFactory] = None,
    *,
    store: Optional[FeatureStore] = None,
    jobs: int = 1,
) -> BenchmarkReport:
    """Evaluate every config; the report's config is the most accurate one,
    ties going to the smallest canonical config string."""
    if not grid:
        raise ConfigError("grid is empty")
    for c in grid:
        if c.metric_kind != metric_kind:
            raise ConfigError(f"grid entry {c.site.label()} has metric_kind {c.metric_kind!r}, expected {metric_kind!r}")
    make = scorer_factory or (lambda c: _default_scorer(c, store))
    table, reports = [], []
    for c in grid:
        r = evaluate_triplets(c, triplets, make(c), jobs=jobs)
        reports.append(r)
        table.append({"config": c.to_dict(), "label": c.site.label(), "accuracy": r.accuracy,
                      "n_correct": r.n_correct, "n_triplets": r.n_triplets})
    best = min(range(len(grid)), key=lambda i: (-reports[i].accuracy, grid[i].canonical()))
    out = reports[best]
    return BenchmarkReport(out.benchmark, grid[best], out.per_triplet, table,
                           environment_info(grid), {"best_index": best, "selection": "exploratory: best on evaluated set"})


def ensemble_vote(choices: Sequence[int]) -> int:
    """Majority of an odd number (>= 3) of binary votes."""
    n = len(choices)
    if n < 3 or n % 2 == 0:
        raise ConfigError(f"majority vote needs an odd number of voters >= 3, got {n}")
    if any(c not in (0, 1) for c in choices):
        raise ValidationError(f"votes must be 0 or 1, got {list(choices)}")
    return int(sum(choices) * 2 > n)


def ensemble(choice_sets: Sequence[dict[str, int]], triplets: Sequence[TripletRecord],
             names: Optional[Sequence[str]] = None) -> BenchmarkReport:
    """Majority-vote report from per-triplet choices of several metrics.

    A voter that tied on a triplet leaves the majority undefined there; the
    ensemble then records a tie, which counts as incorrect.
    """
    n = len(choice_sets)
    if n < 3 or n % 2 == 0:
        raise ConfigError(f"majority vote needs an odd number of voters >= 3, got {n}")
    results = []
    for t in triplets:
        votes = []
        for i, cs in enumerate(choice_sets):
            if t.id not in cs:
                raise ValidationError(f"voter {names[i] if names else i} has no choice for triplet {t.id!r}")
            votes.append(cs[t.id])
        choice = TIE if TIE in votes else ensemble_vote(votes)
        results.append(TripletResult(t.id, None, None, choice, t.gt_index))
    extra = {"voters": list(names) if names else list(range(n))}
    return BenchmarkReport(_benchmark_of(triplets), None, results, environment=environment_info(), extra=extra)


def write_choices(path, report: BenchmarkReport) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for r in report.per_triplet:
            f.write(json.dumps({"id": r.triplet_id, "choice": r.choice}) + "\n")


def read_choices(path) -> dict[str, int]:
    out = {}
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                out[str(d["id"])] = int(d["choice"])
            except (ValueError, KeyError, TypeError) as e:
                raise ValidationError(f"{path}:{n}: bad choice record: {e}") from e
    return out


def population_variance(scores: Sequence[float]) -> float:
    """Population variance; 0 for fewer than two scores."""
    if len(scores) < 2:
        return 0.0
    return float(statistics.pvariance([float(s) for s in scores]))


def video_consistency_variance(config: MetricConfig, frames: Sequence, scorer: Optional[Scorer] = None,
                               *, store: Optional[FeatureStore] = None) -> float:
    """Variance of the scores between the first frame and each later frame."""
    if not frames:
        raise ValidationError("video has no frames")
    scorer = scorer or _default_scorer(config, store)
    scores = [_value(scorer(frames[0], f)) for f in frames[1:]]
    return population_variance(scores)


def sweep_series(report: BenchmarkReport) -> dict[str, list[tuple[int, float]]]:
    """Accuracy against timestep, one series per attention site label."""
    series: dict[str, list[tuple[int, float]]] = {}
    for row in report.grid_table or []:
        s = row["config"]["site"]
        name = f"{s['kind']}:{s['block']}.{s['layer_ordinal']}"
        if len({r["config"]["site"]["resolution"] for r in report.grid_table}) > 1:
            name += f"/{s['resolution']}px"
        t = -1 if s["timestep"] is None else s["timestep"]
        series.setdefault(name, []).append((t, row["accuracy"]))
    return {k: sorted(v) for k, v in series.items()}


def block_series(report: BenchmarkReport) -> dict[str, list[tuple[str, float]]]:
    """Accuracy against site, one series per timestep."""
    series: dict[str, list[tuple[str, float]]] = {}
    for row in report.grid_table or []:
        s = row["config"]["site"]
        name = "no noise" if s["timestep"] is None else f"t={s['timestep']}"
        series.setdefault(name, []).append((f"{s['kind']}:{s['block']}.{s['layer_ordinal']}", row["accuracy"]))
    return series


def _markdown(report: BenchmarkReport) -> str:
    lines = [f"# {report.benchmark}", ""]
    if report.config is not None:
        lines += [f"config: `{report.config.canonical()}`", ""]
    lines += [f"accuracy: {report.accuracy:.4f} ({report.n_correct}/{report.n_triplets})", ""]
    if report.grid_table:
        lines += ["| site | accuracy | correct |", "|---|---|---|"]
        lines += [f"| {r['label']} | {r['accuracy']:.4f} | {r['n_correct']}/{r['n_triplets']} |"
                  for r in report.grid_table]
        lines.append("")
    return "\n".join(lines)


def _plot(report: BenchmarkReport, out: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, pts in sweep_series(report).items():
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=name)
    ax.set_xlabel("timestep")
    ax.set_ylabel("accuracy")
    ax.set_title(f"{report.benchmark}: accuracy vs timestep")
    ax.legend(fontsize=7)
    fig.tight_layout()
    p = out / "sweep_timestep.png"
    fig.savefig(p, metadata={"Software": None})
    plt.close(fig)
    paths.append(p)

    fig, ax = plt.subplots(figsize=(6, 4))
    for name, pts in block_series(report).items():
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=name)
    ax.set_xlabel("site")
    ax.set_ylabel("accuracy")
    ax.set_title(f"{report.benchmark}: accuracy vs block")
    ax.tick_params(axis="x", labelrotation=45)
    ax.legend(fontsize=7)
    fig.tight_layout()
    p = out / "sweep_block.png"
    fig.savefig(p, metadata={"Software": None})
    plt.close(fig)
    paths.append(p)
    return paths


def emit_report(report: BenchmarkReport, out_dir, formats: Iterable[str] = ("json",)) -> dict[str, list[Path]]:
    """Write the report in each requested format; returns the files per format.

    ``plot`` needs a grid table and is skipped (empty list) without one.
    """
    wanted = []
    for f in formats:
        f = _FORMAT_ALIASES.get(f, f)
        if f not in FORMATS:
            raise ConfigError(f"unknown report format {f!r}; choose from {FORMATS}")
        if f not in wanted:
            wanted.append(f)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        written: dict[str, list[Path]] = {}
        for f in wanted:
            if f == "json":
                p = out / "report.json"
                p.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
                written[f] = [p]
            elif f == "csv":
                p = out / "report.csv"
                with open(p, "w", newline="", encoding="utf-8") as fh:
                    w = csv.writer(fh, lineterminator="\n")
                    w.writerow(["triplet_id", "score0", "score1", "choice", "gt_index", "correct"])
                    for r in report.per_triplet:
                        w.writerow([r.triplet_id, _fmt(r.score0), _fmt(r.score1), r.choice, r.gt_index, int(r.correct)])
                written[f] = [p]
            elif f == "markdown":
                p = out / "report.md"
                p.write_text(_markdown(report), encoding="utf-8")
                written[f] = [p]
            else:
                written[f] = _plot(report, out) if report.grid_table else []
    except OSError as e:
        raise DiffSimError(f"cannot write report to {out}: {e}") from e
    return written


def _fmt(x: Optional[float]) -> str:
    return "" if x is None else repr(float(x))


def read_report(path) -> BenchmarkReport:
    return BenchmarkReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
