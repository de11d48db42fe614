"""Experiment configuration and the corpus/task wiring shared by the CLI and the
acceptance experiments.

All randomness derives from one global seed through named substreams
("corpus", "tasks", "train", "eval"), so each stage can be re-run alone.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .corpus import SynthSpec, load_corpus, synth_corpus
from .errors import ConfigError, FormatError, IoError
from .evaluation import NoiseConfig
from .metatrain import TrainConfig
from .sepmodel import ModelConfig
from .tasks import SpeakerCorpus, build_task_set

CONFIG_FORMAT = "metasep-experiment"
ROLES = ("source", "target")


def substream_seed(seed: int, name: str) -> int:
    """Stable 63-bit seed for a named substream of the global seed."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0]) >> 1


def substream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(substream_seed(seed, name))


def _spec(**kw):
    d = SynthSpec(**kw).to_dict()
    d.pop("seed")  # derived from the global seed
    return d


def _default_corpus():
    return {
        "synth": [
            {"role": "source", "collapse_to": "src",
             "spec": _spec(num_domains=8, speakers_per_domain=4, domain_shift=0.0, label_prefix="src")},
            {"role": "target",
             "spec": _spec(num_domains=4, speakers_per_domain=4, domain_shift=0.5, label_prefix="tgt")},
        ]
    }


def _default_model():
    d = ModelConfig().to_dict()
    d.pop("seed")
    return d


def _default_train():
    d = TrainConfig().to_dict()
    d.pop("seed")
    return d


@dataclass
class ExperimentConfig:
    seed: int = 0
    corpus: dict = field(default_factory=_default_corpus)
    tasks: dict = field(default_factory=lambda: {
        "num_sources": 2, "train_tasks": 300, "val_tasks": 20, "target_tasks_per_domain": 8,
        "source_domains": None, "target_domains": None,
    })
    model: dict = field(default_factory=_default_model)
    train: dict = field(default_factory=_default_train)
    eval: dict = field(default_factory=lambda: {
        "adapt": True, "alpha": 0.01, "steps": 1, "alpha_grid": None, "noise_snr_db": None, "ratings": None,
    })

    # -- typed views ---------------------------------------------------------------
    def model_config(self) -> ModelConfig:
        """Model config; the init seed comes from the "model" substream unless set explicitly."""
        seed = self.model.get("seed")
        if seed is None:
            seed = substream_seed(self.seed, "model") % (1 << 31)
        return ModelConfig.from_dict({**self.model, "seed": seed})

    def train_config(self) -> TrainConfig:
        data = {k: v for k, v in self.train.items() if k != "seed"}
        return TrainConfig.from_dict({**data, "seed": substream_seed(self.seed, "train")})

    def noise_config(self) -> Optional[NoiseConfig]:
        snr = self.eval.get("noise_snr_db")
        if snr is None:
            return None
        return NoiseConfig(snr_db=float(snr), seed=substream_seed(self.seed, "eval/noise"))

    def validate(self) -> "ExperimentConfig":
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        has_synth, has_manifest = "synth" in self.corpus, "manifest" in self.corpus
        if has_synth == has_manifest:
            raise ConfigError("corpus needs exactly one of 'synth' or 'manifest'")
        if has_synth:
            for part in self.corpus["synth"]:
                if part.get("role") not in ROLES:
                    raise ConfigError(f"synth part role must be one of {ROLES}")
                SynthSpec.from_dict({**part["spec"], "seed": 0})
        elif not (self.tasks.get("source_domains") and self.tasks.get("target_domains")):
            raise ConfigError("a manifest corpus needs explicit source_domains and target_domains")
        if self.tasks.get("num_sources") not in (2, 3):
            raise ConfigError("tasks.num_sources must be 2 or 3")
        self.model_config()
        self.train_config()
        if self.eval.get("steps", 1) < 1:
            raise ConfigError("eval.steps must be >= 1")
        return self

    # -- serialization ----------------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": CONFIG_FORMAT,
            "seed": self.seed,
            "corpus": self.corpus,
            "tasks": self.tasks,
            "model": self.model,
            "train": self.train,
            "eval": self.eval,
        }

    @classmethod
    def from_dict(cls, data) -> "ExperimentConfig":
        data = dict(data)
        if data.pop("format", CONFIG_FORMAT) != CONFIG_FORMAT:
            raise ConfigError("not an experiment config")
        base = cls()
        unknown = set(data) - set(base.to_dict())
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        merged = {
            "seed": data.get("seed", base.seed),
            "corpus": data.get("corpus", base.corpus),
            "tasks": {**base.tasks, **data.get("tasks", {})},
            "model": {**base.model, **data.get("model", {})},
            "train": {**base.train, **data.get("train", {})},
            "eval": {**base.eval, **data.get("eval", {})},
        }
        return cls(**merged).validate()

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise IoError(f"cannot read config {path}: {exc}", path=str(path)) from exc
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise FormatError(f"config {path} is not valid JSON: {exc}") from exc


# -- corpus and tasks ------------------------------------------------------------------


@dataclass
class Experiment:
    corpus: SpeakerCorpus
    source_domains: list
    target_domains: list


def synth_part_spec(cfg: ExperimentConfig, k: int) -> SynthSpec:
    part = cfg.corpus["synth"][k]
    seed = part["spec"].get("seed")
    if seed is None:
        seed = substream_seed(cfg.seed, f"corpus/{k}") % (1 << 31)
    return SynthSpec.from_dict({**part["spec"], "seed": seed})


def build_corpus(cfg: ExperimentConfig) -> Experiment:
    if "manifest" in cfg.corpus:
        corpus = load_corpus(cfg.corpus["manifest"], cfg.corpus.get("sample_rate_hz", 8000))
        return Experiment(corpus, list(cfg.tasks["source_domains"]), list(cfg.tasks["target_domains"]))
    corpus, sources, targets = None, [], []
    for k, part in enumerate(cfg.corpus["synth"]):
        piece = synth_corpus(synth_part_spec(cfg, k))
        if part.get("collapse_to"):
            piece = piece.relabel({d: part["collapse_to"] for d in piece.domains()})
        labels = list(piece.domains())
        (sources if part["role"] == "source" else targets).extend(labels)
        corpus = piece if corpus is None else corpus.merged(piece)
    sources = list(cfg.tasks.get("source_domains") or sources)
    targets = list(cfg.tasks.get("target_domains") or targets)
    return Experiment(corpus, sources, targets)


def domain_shifts(cfg: ExperimentConfig) -> dict:
    """Domain label -> synthetic shift (synthetic corpora only)."""
    out = {}
    for k, part in enumerate(cfg.corpus.get("synth", [])):
        spec = SynthSpec.from_dict({**part["spec"], "seed": 0})
        for d in range(spec.num_domains):
            label = part.get("collapse_to") or f"{spec.label_prefix}{d}"
            out[label] = spec.domain_shift
    return out


def build_tasks(cfg: ExperimentConfig, exp: Experiment):
    """(train, validation, target) task lists."""
    t = cfg.tasks
    c = t["num_sources"]
    source = exp.corpus.subset(exp.source_domains)
    rng = substream(cfg.seed, "tasks/source")
    pool = build_task_set(source, c, t["train_tasks"] + t["val_tasks"], rng)
    if len(pool) < t["train_tasks"] + t["val_tasks"]:
        raise ConfigError(f"source corpus yields only {len(pool)} distinct tasks")
    train, val = pool[:t["train_tasks"]], pool[t["train_tasks"]:]
    for k, task in enumerate(val):
        task.task_id = f"val{k:05d}"
    target = []
    for d in exp.target_domains:
        rng = substream(cfg.seed, f"tasks/target/{d}")
        part = build_task_set(exp.corpus.subset([d]), c, t["target_tasks_per_domain"], rng)
        for k, task in enumerate(part):
            task.task_id = f"{d}_task{k:04d}"
        target.extend(part)
    return train, val, target
