import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metasep.corpus import SynthSpec, synth_corpus
from metasep.errors import EmptyTaskSet, FormatError, InsufficientData, InvalidInput
from metasep.signal import Waveform
from metasep.tasks import (
    SpeakerCorpus,
    Utterance,
    build_task,
    build_task_set,
    query_size,
    read_task_manifest,
    sample_meta_batch,
    write_task_manifest,
)

CORPUS = synth_corpus(SynthSpec(num_domains=2, speakers_per_domain=4, utterance_len_s=0.5))


def check_task(task, corpus):
    c = task.num_sources
    assert len(task.support) == 1
    assert len(task.query) == query_size(c) == (4 if c == 2 else 8)
    support_ids = set(task.support[0].source_utt_ids)
    assert not support_ids & {u for ex in task.query for u in ex.source_utt_ids}
    assert len(set(task.speaker_ids)) == c
    for ex in task.all_examples():
        speakers = [corpus.utterances[u].speaker_id for u in ex.source_utt_ids]
        assert speakers == task.speaker_ids
        assert {corpus.utterances[u].domain_label for u in ex.source_utt_ids} == {task.domain_label}
        assert ex.snr_offsets_db[0] == 0.0 and all(-5 <= o <= 5 for o in ex.snr_offsets_db)
        assert np.max(np.abs(ex.mixture.samples - ex.source_matrix().sum(0))) <= 1e-9


@pytest.mark.parametrize("c", [2, 3])
def test_build_task_counts(c):
    speakers = CORPUS.domains()["dom0"][:c]
    task = build_task(CORPUS, speakers, np.random.default_rng(0))
    check_task(task, CORPUS)
    # the query mixtures are exactly the grid points disjoint from the support
    used = [sorted({ex.source_utt_ids[k] for ex in task.all_examples()}) for k in range(c)]
    assert all(len(u) == 3 for u in used)


def test_build_task_errors():
    dom0, dom1 = CORPUS.domains()["dom0"], CORPUS.domains()["dom1"]
    with pytest.raises(InvalidInput):
        build_task(CORPUS, [dom0[0], dom0[0]], np.random.default_rng(0))
    with pytest.raises(InvalidInput):
        build_task(CORPUS, [dom0[0], dom1[0]], np.random.default_rng(0))
    short = {u: x for u, x in CORPUS.utterances.items() if not u.endswith("_utt02") or not u.startswith(dom0[0])}
    with pytest.raises(InsufficientData):
        build_task(SpeakerCorpus(short), dom0[:2], np.random.default_rng(0))


def test_too_short_mixture_rejected():
    utts = {
        f"s{k}_u{u}": Utterance(Waveform(np.random.default_rng(k * 10 + u).standard_normal(1000), 8000), f"s{k}", "d")
        for k in range(2) for u in range(3)
    }
    with pytest.raises(InsufficientData):
        build_task(SpeakerCorpus(utts), ["s0", "s1"], np.random.default_rng(0))


def test_trimming_to_shortest_utterance():
    rng = np.random.default_rng(0)
    utts = {}
    for k in range(2):
        for u in range(3):
            utts[f"s{k}_u{u}"] = Utterance(Waveform(rng.standard_normal(4000 + 300 * u + 7 * k), 8000), f"s{k}", "d")
    task = build_task(SpeakerCorpus(utts), ["s0", "s1"], np.random.default_rng(1))
    for ex in task.all_examples():
        lengths = [len(utts[u].waveform) for u in ex.source_utt_ids]
        assert ex.length == min(lengths)


@settings(max_examples=20)
@given(seed=st.integers(0, 2**32 - 1), c=st.integers(2, 3))
def test_task_set_properties(seed, c):
    tasks = build_task_set(CORPUS, c, 12, np.random.default_rng(seed))
    assert len(tasks) == 12
    keys = set()
    for task in tasks:
        check_task(task, CORPUS)
        keys.add((tuple(task.speaker_ids), tuple(ex.source_utt_ids[k] for ex in task.all_examples() for k in range(c))))
    assert len(keys) == len(tasks)


def test_task_set_is_deterministic():
    a = build_task_set(CORPUS, 2, 8, np.random.default_rng(5))
    b = build_task_set(CORPUS, 2, 8, np.random.default_rng(5))
    for x, y in zip(a, b):
        assert x.task_id == y.task_id and x.speaker_ids == y.speaker_ids
        for ex, ey in zip(x.all_examples(), y.all_examples()):
            assert ex.source_utt_ids == ey.source_utt_ids and ex.snr_offsets_db == ey.snr_offsets_db
            assert np.array_equal(ex.mixture.samples, ey.mixture.samples)


def test_task_set_small_domains():
    one_domain = CORPUS.subset(["dom0"])
    tasks = build_task_set(one_domain, 2, 10, np.random.default_rng(0))
    pairs = {tuple(t.speaker_ids) for t in tasks}
    assert len(pairs) <= 6 and len(tasks) <= 10
    two = one_domain.subset(["dom0"])
    two = SpeakerCorpus({u: x for u, x in two.utterances.items() if x.speaker_id in two.domains()["dom0"][:2]})
    assert len({tuple(t.speaker_ids) for t in build_task_set(two, 2, 5, np.random.default_rng(0))}) == 1
    assert build_task_set(CORPUS, 2, 0, np.random.default_rng(0)) == []
    with pytest.raises(EmptyTaskSet):
        build_task_set(two, 3, 5, np.random.default_rng(0))


def test_sample_meta_batch():
    tasks = build_task_set(CORPUS, 2, 6, np.random.default_rng(0))
    whole = sample_meta_batch(tasks, len(tasks), np.random.default_rng(1))
    assert sorted(t.task_id for t in whole) == sorted(t.task_id for t in tasks)
    seq_a = [[t.task_id for t in sample_meta_batch(tasks, 3, r)] for r in [np.random.default_rng(2)] * 4]
    rng = np.random.default_rng(2)
    seq_b = [[t.task_id for t in sample_meta_batch(tasks, 3, rng)] for _ in range(4)]
    assert seq_a == seq_b and all(len(set(b)) == 3 for b in seq_a)
    with pytest.raises(InvalidInput):
        sample_meta_batch(tasks, 7, rng)


def test_manifest_round_trip(tmp_path):
    tasks = build_task_set(CORPUS, 3, 4, np.random.default_rng(0))
    path = tmp_path / "tasks.jsonl"
    write_task_manifest(tasks, path)
    lines = path.read_text().splitlines()
    assert len(lines) == 4 * 9
    assert lines[0].startswith('{"task_id": ')
    back = read_task_manifest(path, CORPUS)
    for a, b in zip(tasks, back):
        assert (a.task_id, a.domain_label, a.speaker_ids) == (b.task_id, b.domain_label, b.speaker_ids)
        for ea, eb in zip(a.all_examples(), b.all_examples()):
            assert np.array_equal(ea.mixture.samples, eb.mixture.samples)
    path.write_text('{"task_id": "x"}\n')
    with pytest.raises(FormatError):
        read_task_manifest(path, CORPUS)
