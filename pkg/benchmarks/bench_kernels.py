"""Compare the compiled and pure-numpy framing kernels, alone and inside a
full meta-gradient evaluation.

    python3 benchmarks/bench_kernels.py --repeats 20
"""

import argparse
import json
import time
from contextlib import contextmanager

import numpy as np

from metasep import _kernels_py, kernels
from metasep.diffcore import meta_grad_fomaml, meta_grad_maml
from metasep.experiment import ExperimentConfig, build_corpus, build_tasks
from metasep.sepmodel import ModelConfig, init_params

try:
    from metasep import _ckernels
except ImportError:
    _ckernels = None


@contextmanager
def backend(impl):
    saved = kernels.frame, kernels.overlap_add
    kernels.frame, kernels.overlap_add = impl.frame, impl.overlap_add
    try:
        yield
    finally:
        kernels.frame, kernels.overlap_add = saved


def timeit(fn, repeats):
    fn()
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(1e3 * (time.perf_counter() - start))
    return float(np.mean(times)), float(np.std(times))


def kernel_cases(repeats, rng):
    rows = []
    for n, length, window, hop in [(1, 8000, 32, 16), (15, 4000, 32, 16), (15, 4000, 40, 15), (4, 8000, 64, 8),
                                   (15, 4000, 256, 128)]:
        x = rng.standard_normal((n, length))
        nf = kernels.num_frames(length, window, hop)
        frames = rng.standard_normal((n, nf, window))
        for name, impl in (("python", _kernels_py), ("compiled", _ckernels)):
            if impl is None:
                continue
            f_ms, _ = timeit(lambda: impl.frame(x, window, hop), repeats)
            o_ms, _ = timeit(lambda: impl.overlap_add(frames, hop, length), repeats)
            rows.append({"case": f"N={n} T={length} W={window} H={hop}", "backend": name,
                         "frame_ms": f_ms, "overlap_add_ms": o_ms})
    return rows


def end_to_end(repeats):
    cfg = ExperimentConfig.from_dict({"tasks": {"train_tasks": 3, "val_tasks": 0, "target_tasks_per_domain": 1}})
    tr, _, _ = build_tasks(cfg, build_corpus(cfg))
    model_cfg = ModelConfig()
    params = init_params(model_cfg)
    task = tr[0]
    rows = []
    for name, impl in (("python", _kernels_py), ("compiled", _ckernels)):
        if impl is None:
            continue
        with backend(impl):
            for label, fn in (("maml", meta_grad_maml), ("fomaml", meta_grad_fomaml)):
                mean, std = timeit(lambda: fn(params, task.support, task.query, 0.01, 1, model_cfg), repeats)
                rows.append({"backend": name, "meta_grad": label, "mean_ms": mean, "std_ms": std})
    return rows


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=20)
    parser.add_argument("--json", help="also write results here")
    args = parser.parse_args()
    if _ckernels is None:
        print("compiled extension not built; timing the python backend only")
    rng = np.random.default_rng(0)
    kern = kernel_cases(args.repeats, rng)
    print(f"{'case':28s} {'backend':9s} {'frame ms':>9s} {'ola ms':>9s}")
    for r in kern:
        print(f"{r['case']:28s} {r['backend']:9s} {r['frame_ms']:9.3f} {r['overlap_add_ms']:9.3f}")
    e2e = end_to_end(max(3, args.repeats // 4))
    print(f"\n{'backend':9s} {'meta grad':9s} {'mean ms':>9s} {'std ms':>8s}")
    for r in e2e:
        print(f"{r['backend']:9s} {r['meta_grad']:9s} {r['mean_ms']:9.2f} {r['std_ms']:8.2f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"kernels": kern, "end_to_end": e2e}, fh, indent=2)


if __name__ == "__main__":
    main()
