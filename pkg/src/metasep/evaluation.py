"""One-shot adaptation evaluation, per-domain aggregation and the
similarity/performance correlation."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import autodiff as ad
from .diffcore import adapted_params
from .errors import DegenerateInput, FormatError, InvalidInput, IoError, KeyMissing
from .params import ParamVector
from .sepmodel import ModelConfig, check_params, forward
from .signal import MixtureExample, Waveform, add_noise, pit_si_snri
from .tasks import MetaTask

RATING_RANGE = (1.0, 7.0)


@dataclass(frozen=True)
class NoiseConfig:
    """Seeded power-law noise; ``exponent`` 1.0 gives pink noise."""

    snr_db: float = 10.0
    seed: int = 0
    exponent: float = 1.0


@dataclass
class NativeLikenessTable:
    ratings: Dict[str, float]

    def __post_init__(self):
        lo, hi = RATING_RANGE
        for label, value in self.ratings.items():
            if not lo <= value <= hi:
                raise InvalidInput(f"rating {value} for {label!r} is outside [{lo:g}, {hi:g}]")


@dataclass
class TaskScore:
    task_id: str
    domain_label: str
    si_snri: float


@dataclass
class EvalReport:
    per_task: List[TaskScore]
    per_domain: Dict[str, float]
    overall: float
    settings: dict
    correlation: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "settings": dict(self.settings),
            "overall": self.overall,
            "per_domain": dict(self.per_domain),
            "correlation": self.correlation,
            "per_task": [
                {"task_id": t.task_id, "domain_label": t.domain_label, "si_snri": t.si_snri}
                for t in self.per_task
            ],
            **({"extra": self.extra} if self.extra else {}),
        }

    @classmethod
    def from_dict(cls, data) -> "EvalReport":
        return cls(
            per_task=[TaskScore(**t) for t in data["per_task"]],
            per_domain=dict(data["per_domain"]),
            overall=data["overall"],
            settings=dict(data["settings"]),
            correlation=data.get("correlation"),
            extra=dict(data.get("extra", {})),
        )


def aggregate(per_task: List[TaskScore]):
    """(per-domain means, overall mean) from per-task scores."""
    if not per_task:
        raise InvalidInput("no tasks to aggregate")
    by_domain: Dict[str, list] = {}
    for t in per_task:
        by_domain.setdefault(t.domain_label, []).append(t.si_snri)
    per_domain = {d: float(np.mean(v)) for d, v in sorted(by_domain.items())}
    overall = float(np.mean([t.si_snri for t in per_task]))
    return per_domain, overall


def colored_noise(length: int, rng: np.random.Generator, exponent: float = 1.0) -> np.ndarray:
    white = rng.standard_normal(length)
    spec = np.fft.rfft(white)
    freqs = np.arange(spec.shape[0], dtype=np.float64)
    freqs[0] = 1.0
    spec /= freqs ** (exponent / 2.0)
    spec[0] = 0.0
    return np.fft.irfft(spec, n=length)


def _noisy(example: MixtureExample, noise_cfg: NoiseConfig, rng) -> MixtureExample:
    clean = example.mixture
    noise = Waveform(colored_noise(len(clean), rng, noise_cfg.exponent), clean.sample_rate_hz)
    noisy = add_noise(clean, noise, noise_cfg.snr_db)
    return MixtureExample(
        sources=example.sources,
        mixture=noisy,
        source_utt_ids=example.source_utt_ids,
        snr_offsets_db=example.snr_offsets_db,
        noise=Waveform(noisy.samples - clean.samples, clean.sample_rate_hz),
    )


def noisy_task(task: MetaTask, noise_cfg: NoiseConfig, index: int) -> MetaTask:
    """Overlay noise on every support and query mixture of a task."""
    rng = np.random.default_rng([noise_cfg.seed, index])
    return MetaTask(
        task.task_id,
        task.domain_label,
        task.num_sources,
        [_noisy(ex, noise_cfg, rng) for ex in task.support],
        [_noisy(ex, noise_cfg, rng) for ex in task.query],
        list(task.speaker_ids),
    )


def query_si_snri(params: ParamVector, examples, model_cfg: ModelConfig) -> float:
    """Mean PIT-assigned Si-SNRi over a list of mixtures."""
    scores = []
    groups: Dict[int, list] = {}
    for ex in examples:
        groups.setdefault(ex.length, []).append(ex)
    with ad.no_grad():
        theta = ad.Tensor(params.values)
        for group in groups.values():
            est, _ = forward(theta, np.stack([ex.mixture.samples for ex in group]), model_cfg, params.layout)
            for ex, out in zip(group, est.data):
                score, _ = pit_si_snri(list(out), [s.samples for s in ex.sources], ex.mixture.samples)
                scores.append(score)
    return float(np.mean(scores))


def _score_task(params, task, adapt, alpha, steps, model_cfg) -> float:
    theta = adapted_params(params, task.support, alpha, steps, model_cfg) if adapt else params
    return query_si_snri(theta, task.query, model_cfg)


def evaluate(
    params: ParamVector,
    target_tasks,
    adapt: bool,
    alpha: float,
    steps: int,
    noise_cfg: Optional[NoiseConfig],
    model_cfg: ModelConfig,
    workers: int = 1,
) -> EvalReport:
    """Score each task's query set, optionally after fine-tuning on its support mixture.

    Each task adapts its own copy of ``params``; scores are averaged per
    mixture, then per task, then per domain and overall.
    """
    check_params(params, model_cfg)
    tasks = list(target_tasks)
    if not tasks:
        raise InvalidInput("no target tasks")
    if adapt and any(not t.support for t in tasks):
        raise InvalidInput("adaptation needs a nonempty support set in every task")
    if noise_cfg is not None:
        tasks = [noisy_task(t, noise_cfg, k) for k, t in enumerate(tasks)]

    def run(task):
        return _score_task(params, task, adapt, alpha, steps, model_cfg)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scores = list(pool.map(run, tasks))
    else:
        scores = [run(t) for t in tasks]
    per_task = [TaskScore(t.task_id, t.domain_label, s) for t, s in zip(tasks, scores)]
    per_domain, overall = aggregate(per_task)
    settings = {
        "finetuned": bool(adapt),
        "noisy": noise_cfg is not None,
        "alpha": float(alpha) if adapt else None,
        "steps": int(steps) if adapt else None,
        "noise_snr_db": noise_cfg.snr_db if noise_cfg is not None else None,
    }
    return EvalReport(per_task, per_domain, overall, settings)


def pearson(xs, ys) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise InvalidInput("pearson needs two equal-length 1-D sequences")
    if x.shape[0] < 2:
        raise DegenerateInput("pearson needs at least two points")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateInput("pearson is undefined for a constant sequence")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def correlation_report(report: EvalReport, table: NativeLikenessTable) -> float:
    """Pearson r between domain ratings and per-domain Si-SNRi, domains in label order."""
    labels = sorted(report.per_domain)
    missing = [d for d in labels if d not in table.ratings]
    if missing:
        raise KeyMissing(f"no rating for domain(s) {missing}")
    if len(labels) < 2:
        raise DegenerateInput("correlation needs at least two domains")
    return pearson([table.ratings[d] for d in labels], [report.per_domain[d] for d in labels])


def ratings_from_shifts(shifts: Dict[str, float]) -> NativeLikenessTable:
    """Map synthetic domain shift in [0, 1] onto the 7 (native) .. 1 rating scale."""
    return NativeLikenessTable({d: 7.0 - 6.0 * s for d, s in shifts.items()})


@dataclass
class DegradationSummary:
    count: int
    total: int
    tasks: List[dict]


def degradation(unadapted: EvalReport, adapted: EvalReport) -> DegradationSummary:
    """Tasks whose Si-SNRi drops after fine-tuning."""
    base = {t.task_id: t.si_snri for t in unadapted.per_task}
    worse = []
    for t in adapted.per_task:
        if t.task_id not in base:
            raise KeyMissing(f"task {t.task_id!r} missing from the unadapted report")
        delta = t.si_snri - base[t.task_id]
        if delta < 0:
            worse.append({"task_id": t.task_id, "domain_label": t.domain_label, "delta_db": delta})
    return DegradationSummary(len(worse), len(adapted.per_task), worse)


def delta_table(report_a: EvalReport, report_b: EvalReport) -> List[dict]:
    """Signed per-domain and overall Si-SNRi differences (b - a)."""
    rows = []
    for d in sorted(set(report_a.per_domain) | set(report_b.per_domain)):
        a, b = report_a.per_domain.get(d), report_b.per_domain.get(d)
        rows.append({"domain_label": d, "a": a, "b": b, "delta": None if a is None or b is None else b - a})
    rows.append({"domain_label": "overall", "a": report_a.overall, "b": report_b.overall,
                 "delta": report_b.overall - report_a.overall})
    return rows


# -- files -------------------------------------------------------------------------


def load_ratings(path) -> NativeLikenessTable:
    """Read ``domain_label,rating`` lines; a header row is optional."""
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    except OSError as exc:
        raise IoError(f"cannot read ratings {path}: {exc}", path=str(path)) from exc
    ratings = {}
    for lineno, row in enumerate(rows, 1):
        if len(row) != 2:
            raise FormatError(f"{path}:{lineno}: expected 'domain_label,rating'")
        label, value = row[0].strip(), row[1].strip()
        try:
            ratings[label] = float(value)
        except ValueError:
            if lineno == 1:
                continue  # header
            raise FormatError(f"{path}:{lineno}: rating {value!r} is not a number") from None
    return NativeLikenessTable(ratings)


def write_report(report: EvalReport, out_dir, table: Optional[NativeLikenessTable] = None, stem="report"):
    """Write ``<stem>.json`` plus ``<stem>_domains.csv`` and ``<stem>_tasks.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{stem}.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    with open(out_dir / f"{stem}_domains.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("domain_label", "rating", "si_snri"))
        for d, v in report.per_domain.items():
            rating = table.ratings.get(d) if table is not None else None
            w.writerow((d, "" if rating is None else repr(rating), repr(v)))
    with open(out_dir / f"{stem}_tasks.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("task_id", "domain_label", "si_snri"))
        for t in report.per_task:
            w.writerow((t.task_id, t.domain_label, repr(t.si_snri)))


def read_report(path) -> EvalReport:
    path = Path(path)
    try:
        return EvalReport.from_dict(json.loads(path.read_text()))
    except OSError as exc:
        raise IoError(f"cannot read report {path}: {exc}", path=str(path)) from exc
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{path} is not an evaluation report ({exc})") from exc
