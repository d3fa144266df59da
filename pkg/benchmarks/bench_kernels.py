"""Time the hot kernels on the numba backend and on the plain-numpy fallback.

Each backend runs in its own interpreter because ``ECGSSL_DISABLE_NUMBA`` is read
at import time. Compilation is excluded by a warm-up call.

    python benchmarks/bench_kernels.py --segments 200 --repeats 5
"""

from __future__ import annotations

import argparse
import json
import os
import statistics
import subprocess
import sys
import time


def _workloads(n_segments: int):
    import numpy as np

    from ecgssl.data import zscore
    from ecgssl.features import extract_features
    from ecgssl.peaks import detect_rpeaks, prominent_peaks
    from ecgssl.synth import RhythmClass, random_spec, synth_segment

    rng = np.random.default_rng(0)
    classes = list(RhythmClass)
    segs = [zscore(synth_segment(random_spec(classes[i % len(classes)], rng, 500.0, 10.0, 3, 0.05))[0])
            for i in range(n_segments)]
    peaks = [detect_rpeaks(s.data, s.fs_hz) for s in segs]
    noisy = [rng.normal(size=5000).cumsum() for _ in range(n_segments)]
    return {
        "pan_tompkins": lambda: [detect_rpeaks(s.data, s.fs_hz) for s in segs],
        "prominent_peaks": lambda: [prominent_peaks(x, 0.5) for x in noisy],
        "extract_features": lambda: [extract_features(s, r) for s, r in zip(segs, peaks)],
    }


def child(n_segments: int, repeats: int) -> None:
    from ecgssl import backend

    out = {"backend": backend(), "timings": {}}
    for name, fn in _workloads(n_segments).items():
        fn()  # warm-up / JIT compile
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        out["timings"][name] = statistics.median(times)
    print(json.dumps(out))


def run_backend(disable: bool, n_segments: int, repeats: int) -> dict:
    env = dict(os.environ, ECGSSL_DISABLE_NUMBA="1" if disable else "0")
    cmd = [sys.executable, __file__, "--child", "--segments", str(n_segments), "--repeats", str(repeats)]
    res = subprocess.run(cmd, env=env, capture_output=True, text=True, check=True)
    return json.loads(res.stdout.strip().splitlines()[-1])


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--segments", type=int, default=200, help="10-s, 500 Hz segments per workload")
    ap.add_argument("--repeats", type=int, default=5, help="timed repetitions (median reported)")
    ap.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    a = ap.parse_args()
    if a.child:
        child(a.segments, a.repeats)
        return
    fast = run_backend(False, a.segments, a.repeats)
    slow = run_backend(True, a.segments, a.repeats)
    print(f"{'kernel':<18} {fast['backend'] + ' (s)':>12} {slow['backend'] + ' (s)':>12} {'speedup':>9}")
    for name, t_fast in fast["timings"].items():
        t_slow = slow["timings"][name]
        print(f"{name:<18} {t_fast:12.4f} {t_slow:12.4f} {t_slow / t_fast:8.1f}x")


if __name__ == "__main__":
    main()
