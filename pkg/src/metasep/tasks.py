"""Meta-task construction: one support mixture plus the (3-1)^C query mixtures
that share no source utterance with it."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .errors import EmptyTaskSet, FormatError, InsufficientData, InvalidInput, IoError
from .signal import MixtureExample, Waveform, mix_at_snr

UTTERANCES_PER_SPEAKER = 3
SNR_RANGE_DB = (-5.0, 5.0)
MIN_MIXTURE_S = 0.5


@dataclass(frozen=True, eq=False)
class Utterance:
    waveform: Waveform
    speaker_id: str
    domain_label: str


@dataclass(eq=False)
class SpeakerCorpus:
    """Utterances keyed by id. ``speaker_info`` carries optional generator metadata."""

    utterances: Dict[str, Utterance]
    speaker_info: Dict[str, dict] = field(default_factory=dict)
    dropped_speakers: int = 0

    def __post_init__(self):
        rates, domains = {}, {}
        for uid, utt in self.utterances.items():
            spk = utt.speaker_id
            rate = rates.setdefault(spk, utt.waveform.sample_rate_hz)
            if rate != utt.waveform.sample_rate_hz:
                raise InvalidInput(f"speaker {spk!r} mixes sample rates ({uid})")
            dom = domains.setdefault(spk, utt.domain_label)
            if dom != utt.domain_label:
                raise InvalidInput(f"speaker {spk!r} appears in domains {dom!r} and {utt.domain_label!r}")

    def speakers(self) -> Dict[str, List[str]]:
        """Speaker id -> sorted utterance ids."""
        out: Dict[str, List[str]] = {}
        for uid in sorted(self.utterances):
            out.setdefault(self.utterances[uid].speaker_id, []).append(uid)
        return out

    def speaker_domain(self, speaker_id) -> str:
        for utt in self.utterances.values():
            if utt.speaker_id == speaker_id:
                return utt.domain_label
        raise KeyError(speaker_id)

    def domains(self) -> Dict[str, List[str]]:
        """Domain label -> sorted speaker ids."""
        out: Dict[str, set] = {}
        for utt in self.utterances.values():
            out.setdefault(utt.domain_label, set()).add(utt.speaker_id)
        return {d: sorted(s) for d, s in sorted(out.items())}

    def subset(self, domain_labels) -> "SpeakerCorpus":
        keep = set(domain_labels)
        utts = {u: x for u, x in self.utterances.items() if x.domain_label in keep}
        info = {s: i for s, i in self.speaker_info.items() if any(x.speaker_id == s for x in utts.values())}
        return SpeakerCorpus(utts, info)

    def relabel(self, mapping) -> "SpeakerCorpus":
        """Rename domains, e.g. to collapse several domains into one source domain."""
        utts = {
            u: Utterance(x.waveform, x.speaker_id, mapping.get(x.domain_label, x.domain_label))
            for u, x in self.utterances.items()
        }
        return SpeakerCorpus(utts, dict(self.speaker_info))

    def merged(self, other: "SpeakerCorpus") -> "SpeakerCorpus":
        clash = set(self.utterances) & set(other.utterances)
        if clash:
            raise InvalidInput(f"utterance ids present in both corpora: {sorted(clash)[:3]}")
        return SpeakerCorpus(
            {**self.utterances, **other.utterances}, {**self.speaker_info, **other.speaker_info}
        )


@dataclass(eq=False)
class MetaTask:
    task_id: str
    domain_label: str
    num_sources: int
    support: List[MixtureExample]
    query: List[MixtureExample]
    speaker_ids: List[str]

    def all_examples(self) -> List[MixtureExample]:
        return list(self.support) + list(self.query)


def query_size(num_sources: int) -> int:
    return (UTTERANCES_PER_SPEAKER - 1) ** num_sources


def _mixture(corpus, utt_ids, offsets, min_len):
    waves = [corpus.utterances[u].waveform for u in utt_ids]
    length = min(len(w) for w in waves)
    if length < min_len:
        raise InsufficientData(
            f"mixture of {utt_ids} is only {length} samples (minimum {min_len})"
        )
    return mix_at_snr([w.trimmed(length) for w in waves], offsets, utt_ids)


def _draw_offsets(rng, count, snr_range):
    return [0.0] + [float(v) for v in rng.uniform(snr_range[0], snr_range[1], count - 1)]


def build_task(
    corpus: SpeakerCorpus,
    speaker_ids,
    rng: np.random.Generator,
    task_id: Optional[str] = None,
    snr_range=SNR_RANGE_DB,
    min_mixture_s=MIN_MIXTURE_S,
) -> MetaTask:
    """Sample 3 utterances per speaker, pick one of the 3^C cross-speaker
    mixtures as support and keep the 2^C disjoint ones as the query set."""
    speaker_ids = list(speaker_ids)
    c = len(speaker_ids)
    if c < 2:
        raise InvalidInput("a task needs at least two speakers")
    if len(set(speaker_ids)) != c:
        raise InvalidInput(f"duplicate speakers in task: {speaker_ids}")
    by_speaker = corpus.speakers()
    domain = None
    chosen = []
    for spk in speaker_ids:
        utts = by_speaker.get(spk, [])
        if len(utts) < UTTERANCES_PER_SPEAKER:
            raise InsufficientData(f"speaker {spk!r} has {len(utts)} utterances, needs {UTTERANCES_PER_SPEAKER}")
        spk_domain = corpus.utterances[utts[0]].domain_label
        if domain is None:
            domain = spk_domain
        elif spk_domain != domain:
            raise InvalidInput(f"speakers span domains {domain!r} and {spk_domain!r}")
        picks = rng.choice(len(utts), UTTERANCES_PER_SPEAKER, replace=False)
        chosen.append([utts[i] for i in picks])

    grid = list(itertools.product(range(UTTERANCES_PER_SPEAKER), repeat=c))
    support_idx = grid[int(rng.integers(len(grid)))]
    query_idx = [g for g in grid if all(g[k] != support_idx[k] for k in range(c))]

    rate = corpus.utterances[chosen[0][0]].waveform.sample_rate_hz
    min_len = int(round(min_mixture_s * rate))

    def build(idx):
        utt_ids = [chosen[k][idx[k]] for k in range(c)]
        return _mixture(corpus, utt_ids, _draw_offsets(rng, c, snr_range), min_len)

    support = [build(support_idx)]
    query = [build(q) for q in query_idx]
    if task_id is None:
        task_id = f"{domain}|{'+'.join(speaker_ids)}|{'+'.join(support[0].source_utt_ids)}"
    return MetaTask(task_id, domain, c, support, query, speaker_ids)


def _task_key(task: MetaTask):
    used = tuple(sorted({u for ex in task.all_examples() for u in ex.source_utt_ids}))
    return tuple(task.speaker_ids), used, tuple(task.support[0].source_utt_ids)


def build_task_set(corpus: SpeakerCorpus, num_sources: int, max_tasks: int, rng: np.random.Generator, **task_kwargs):
    """Up to ``max_tasks`` distinct tasks from same-domain speaker combinations.

    Combinations are visited in a seeded shuffled order; once every combination
    has been used, further rounds reuse speakers with fresh utterance draws.
    """
    if max_tasks <= 0:
        return []
    by_speaker = corpus.speakers()
    combos = []
    for domain, speakers in corpus.domains().items():
        eligible = [s for s in speakers if len(by_speaker[s]) >= UTTERANCES_PER_SPEAKER]
        combos.extend(itertools.combinations(eligible, num_sources))
    if not combos:
        raise EmptyTaskSet(f"no domain has {num_sources} speakers with {UTTERANCES_PER_SPEAKER}+ utterances")

    tasks, seen = [], set()
    stale_rounds = 0
    while len(tasks) < max_tasks and stale_rounds < 3:
        added = 0
        for i in rng.permutation(len(combos)):
            task = build_task(corpus, combos[i], rng, task_id=f"task{len(tasks):05d}", **task_kwargs)
            key = _task_key(task)
            if key in seen:
                continue
            seen.add(key)
            tasks.append(task)
            added += 1
            if len(tasks) == max_tasks:
                break
        stale_rounds = 0 if added else stale_rounds + 1
    return tasks


def sample_meta_batch(task_set, batch_size: int, rng: np.random.Generator):
    """Uniform draw of ``batch_size`` distinct tasks."""
    if batch_size < 1 or batch_size > len(task_set):
        raise InvalidInput(f"cannot draw {batch_size} tasks from a set of {len(task_set)}")
    picks = rng.choice(len(task_set), batch_size, replace=False)
    return [task_set[int(i)] for i in picks]


# -- task manifests -------------------------------------------------------------

MANIFEST_FIELDS = ("task_id", "domain_label", "role", "utt_ids", "snr_offsets_db")


def write_task_manifest(tasks, path) -> None:
    """One JSON record per mixture, fields in a fixed order."""
    lines = []
    for task in tasks:
        for role, examples in (("support", task.support), ("query", task.query)):
            for ex in examples:
                record = dict(
                    zip(
                        MANIFEST_FIELDS,
                        (task.task_id, task.domain_label, role, list(ex.source_utt_ids), list(ex.snr_offsets_db)),
                    )
                )
                lines.append(json.dumps(record))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_task_manifest(path, corpus: SpeakerCorpus):
    """Rebuild tasks from a manifest against the corpus they were drawn from."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise IoError(f"cannot read task manifest {path}: {exc}", path=str(path)) from exc
    grouped: Dict[str, dict] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            entry = grouped.setdefault(rec["task_id"], {"domain": rec["domain_label"], "support": [], "query": []})
            entry[rec["role"]].append((rec["utt_ids"], rec["snr_offsets_db"]))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise FormatError(f"{path}:{lineno}: bad task record ({exc})") from exc
    tasks = []
    for task_id, entry in grouped.items():
        missing = [u for utts, _ in entry["support"] + entry["query"] for u in utts if u not in corpus.utterances]
        if missing:
            raise FormatError(f"task {task_id!r} references unknown utterances {missing[:3]}")

        def build(item):
            utt_ids, offsets = item
            return _mixture(corpus, utt_ids, offsets, 0)

        support = [build(i) for i in entry["support"]]
        query = [build(i) for i in entry["query"]]
        speakers = [corpus.utterances[u].speaker_id for u in support[0].source_utt_ids]
        tasks.append(MetaTask(task_id, entry["domain"], len(speakers), support, query, speakers))
    return tasks
