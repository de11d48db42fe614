import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import RATE, tiny_config
from metasep.errors import DegenerateInput, FormatError, InvalidInput, KeyMissing
from metasep.evaluation import (
    EvalReport,
    NativeLikenessTable,
    NoiseConfig,
    TaskScore,
    aggregate,
    correlation_report,
    degradation,
    delta_table,
    evaluate,
    load_ratings,
    noisy_task,
    pearson,
    ratings_from_shifts,
    read_report,
    write_report,
)
from metasep.sepmodel import ModelConfig, init_params
from metasep.signal import Waveform, mix_at_snr
from metasep.tasks import MetaTask

W = 16
LOW = 6  # DCT coefficients 0..LOW-1 carry source 0, the rest source 1


def dct_matrix(n):
    k = np.arange(n)[:, None]
    t = np.arange(n)[None, :]
    m = np.sqrt(2.0 / n) * np.cos(np.pi * (t + 0.5) * k / n)
    m[0] /= np.sqrt(2.0)
    return m  # rows are orthonormal basis vectors


def band_source(rng, frames, coeffs):
    basis = dct_matrix(W)
    blocks = [rng.standard_normal(len(coeffs)) @ basis[coeffs] for _ in range(frames)]
    return np.concatenate(blocks)


def toy_family(n_tasks=3, frames=20, seed=0):
    rng = np.random.default_rng(seed)
    tasks = []
    for k in range(n_tasks):
        def mixture(j):
            lo = Waveform(band_source(rng, frames, np.arange(LOW)), RATE)
            hi = Waveform(band_source(rng, frames, np.arange(LOW, W)), RATE)
            return mix_at_snr([lo, hi], [0.0, float(rng.uniform(-5, 5))], [f"t{k}_lo{j}", f"t{k}_hi{j}"])
        tasks.append(MetaTask(f"toy{k}", f"dom{k % 2}", 2, [mixture(0)], [mixture(j) for j in range(1, 5)],
                              ["lo", "hi"]))
    return tasks


def oracle_params(cfg):
    params = init_params(cfg)
    values = params.values.copy()
    basis = dct_matrix(W)

    def put(name, array):
        blk = next(b for b in params.layout if b.name == name)
        values[blk.offset:blk.stop] = np.asarray(array, dtype=np.float64).reshape(-1)

    put("encoder", basis.T)  # features = frame @ basis.T = DCT coefficients
    put("decoder", basis)
    put("mask.weight", np.zeros((cfg.separator_hidden, 2 * W)))
    gate = np.where(np.arange(W) < LOW, 30.0, -30.0)
    put("mask.bias", np.concatenate([gate, -gate]))
    return params.with_values(values)


ORACLE_CFG = ModelConfig(window_len=W, hop_len=W, basis_dim=W, separator_hidden=4, separator_layers=1, seed=0)


def test_oracle_params_separate_toy_family():
    report = evaluate(oracle_params(ORACLE_CFG), toy_family(), False, 0.0, 1, None, ORACLE_CFG)
    assert report.overall > 20
    assert report.settings["finetuned"] is False and report.settings["alpha"] is None


def test_alpha_zero_adaptation_matches_no_adaptation():
    cfg = tiny_config()
    params = init_params(cfg)
    tasks = toy_family()
    a = evaluate(params, tasks, False, 0.5, 1, None, cfg)
    b = evaluate(params, tasks, True, 0.0, 1, None, cfg)
    assert [t.si_snri for t in a.per_task] == [t.si_snri for t in b.per_task]
    assert b.settings["finetuned"] is True


def test_aggregation_and_isolation():
    cfg = tiny_config()
    params = init_params(cfg)
    before = params.values.copy()
    tasks = toy_family(n_tasks=4)
    r1 = evaluate(params, tasks, True, 0.05, 1, None, cfg)
    r2 = evaluate(params, tasks, True, 0.05, 1, None, cfg, workers=3)
    assert np.array_equal(params.values, before)
    assert r1.to_dict() == r2.to_dict()
    per_domain, overall = aggregate(r1.per_task)
    assert abs(overall - np.mean([t.si_snri for t in r1.per_task])) <= 1e-12
    for d, v in r1.per_domain.items():
        assert abs(v - np.mean([t.si_snri for t in r1.per_task if t.domain_label == d])) <= 1e-12
    assert per_domain == r1.per_domain


def test_evaluate_preconditions():
    cfg = tiny_config()
    with pytest.raises(InvalidInput):
        evaluate(init_params(cfg), [], False, 0.0, 1, None, cfg)
    task = toy_family(1)[0]
    task.support = []
    with pytest.raises(InvalidInput):
        evaluate(init_params(cfg), [task], True, 0.01, 1, None, cfg)


def test_noise_overlay():
    task = toy_family(1)[0]
    cfg = NoiseConfig(snr_db=5.0, seed=3)
    a, b = noisy_task(task, cfg, 0), noisy_task(task, cfg, 0)
    for ex, ex_b, clean in zip(a.all_examples(), b.all_examples(), task.all_examples()):
        assert np.array_equal(ex.mixture.samples, ex_b.mixture.samples)
        assert np.allclose(ex.mixture.samples, ex.source_matrix().sum(0) + ex.noise.samples, atol=1e-9)
        ratio = 10 * math.log10(clean.mixture.power / ex.noise.power)
        assert abs(ratio - 5.0) < 1e-6
    report = evaluate(init_params(tiny_config()), [task], False, 0.0, 1, cfg, tiny_config())
    assert report.settings["noisy"] and report.settings["noise_snr_db"] == 5.0


def test_pearson_examples():
    x = [1.0, 4.0, 2.0, 8.0]
    assert pearson(x, x) == pytest.approx(1.0, abs=1e-12)
    assert pearson(x, [-v for v in x]) == pytest.approx(-1.0, abs=1e-12)
    assert abs(pearson([1, 2, 3], [2, 1, 4]) - 0.6546537) < 1e-6
    with pytest.raises(DegenerateInput):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(DegenerateInput):
        pearson([1], [2])
    with pytest.raises(InvalidInput):
        pearson([1, 2], [1, 2, 3])


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(3, 12), a=st.floats(0.01, 100), b=st.floats(-100, 100))
def test_pearson_symmetry_and_affine_invariance(seed, n, a, b):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal(n), rng.standard_normal(n)
    r = pearson(x, y)
    assert -1.0 <= r <= 1.0
    assert abs(r - pearson(y, x)) <= 1e-12
    assert abs(r - pearson(a * x + b, y)) <= 1e-12
    assert abs(r - pearson(x, a * y + b)) <= 1e-12


def report_from(per_domain):
    tasks = [TaskScore(f"t_{d}", d, v) for d, v in per_domain.items()]
    pd, overall = aggregate(tasks)
    return EvalReport(tasks, pd, overall, {})


def test_correlation_report():
    rng = np.random.default_rng(0)
    scores = {f"acc{k}": float(rng.uniform(0, 10)) for k in range(10)}
    ratings = {d: float(rng.uniform(1, 7)) for d in scores}
    report = report_from(scores)
    labels = sorted(scores)
    expected = pearson([ratings[d] for d in labels], [scores[d] for d in labels])
    assert correlation_report(report, NativeLikenessTable(ratings)) == pytest.approx(expected, abs=1e-12)
    same = report_from({"a": 2.0, "b": 5.0, "c": 3.0})
    assert correlation_report(same, NativeLikenessTable({"a": 2.0, "b": 5.0, "c": 3.0})) == pytest.approx(1.0)
    with pytest.raises(DegenerateInput):
        correlation_report(report_from({"a": 2.0}), NativeLikenessTable({"a": 3.0}))
    with pytest.raises(KeyMissing):
        correlation_report(same, NativeLikenessTable({"a": 2.0}))
    with pytest.raises(InvalidInput):
        NativeLikenessTable({"a": 9.0})
    table = ratings_from_shifts({"x": 0.0, "y": 1.0, "z": 0.5})
    assert table.ratings == {"x": 7.0, "y": 1.0, "z": 4.0}


def test_degradation_and_delta():
    base = report_from({"a": 1.0, "b": 2.0})
    adapted = report_from({"a": 0.5, "b": 3.0})
    summary = degradation(base, adapted)
    assert summary.count == 1 and summary.total == 2 and summary.tasks[0]["task_id"] == "t_a"
    rows = delta_table(base, adapted)
    assert rows[-1]["domain_label"] == "overall" and rows[-1]["delta"] == pytest.approx(0.25)
    assert {r["domain_label"]: r["delta"] for r in rows[:-1]} == {"a": -0.5, "b": 1.0}


def test_report_files(tmp_path):
    report = report_from({"a": 1.0, "b": 2.5})
    report.correlation = 0.3
    table = NativeLikenessTable({"a": 6.0, "b": 2.0})
    write_report(report, tmp_path, table)
    back = read_report(tmp_path / "report.json")
    assert back.to_dict() == report.to_dict()
    rows = (tmp_path / "report_domains.csv").read_text().splitlines()
    assert rows[0] == "domain_label,rating,si_snri" and rows[1] == "a,6.0,1.0"
    (tmp_path / "junk.json").write_text("[]")
    with pytest.raises(FormatError):
        read_report(tmp_path / "junk.json")


def test_load_ratings(tmp_path):
    path = tmp_path / "r.csv"
    path.write_text("domain_label,rating\nacc0,6.5\nacc1, 2\n")
    assert load_ratings(path).ratings == {"acc0": 6.5, "acc1": 2.0}
    path.write_text("acc0,6.5\nacc1,abc\n")
    with pytest.raises(FormatError):
        load_ratings(path)
