"""Times the numba and numpy kernel backends on the shapes the models
actually run: im2col / col2im_add over the conv layers of the 32x32
pipeline and the 3x3 sliding median from the blur defense.

Run:  python3 benchmarks/kernel_bench.py [--batch 32] [--repeats 30]

Both implementations are called directly (bypassing the GAMA_KERNELS
switch) so one process can compare them; agreement is checked before
anything is timed. The first numba call pays JIT compilation and is
excluded by the warmup pass.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from gama import kernels
from gama.kernels import _col2im_add_numpy, _im2col_numpy, _median_blur_numpy

try:
    from gama import _kernels_numba as nb
except ImportError:
    nb = None

# (label, channels, hw, kh, stride, pad) taken from the conv layers in use
CONV_CASES = [
    ("enc 3ch 32px k3 s1", 3, 32, 3, 1, 1),
    ("mid 16ch 32px k3 s2", 16, 32, 3, 2, 1),
    ("mid 32ch 16px k3 s1", 32, 16, 3, 1, 1),
    ("deep 64ch 8px k3 s1", 64, 8, 3, 1, 1),
]


def _time(fn, repeats: int) -> float:
    fn()  # warmup; compiles the numba path on first use
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats * 1e3


def _check_close(a: np.ndarray, b: np.ndarray, what: str) -> None:
    worst = float(np.abs(a - b).max())
    if worst > 1e-5:
        raise AssertionError(f"backends disagree on {what}: max diff {worst}")


def bench_conv_case(label, c, hw, kh, stride, pad, batch, repeats, rng):
    x = rng.standard_normal((batch, c, hw, hw)).astype(np.float32)
    cols_np = _im2col_numpy(x, kh, kh, stride, pad)
    rows = []
    if nb is not None:
        cols_nb = nb.im2col(x, kh, kh, stride, pad)
        _check_close(cols_np, cols_nb, f"im2col {label}")
    t_np = _time(lambda: _im2col_numpy(x, kh, kh, stride, pad), repeats)
    t_nb = (_time(lambda: nb.im2col(x, kh, kh, stride, pad), repeats)
            if nb is not None else float("nan"))
    rows.append((f"im2col   {label}", t_np, t_nb))

    g = rng.standard_normal(cols_np.shape).astype(np.float32)
    back_np = _col2im_add_numpy(g, batch, c, hw, hw, kh, kh, stride, pad)
    if nb is not None:
        back_nb = nb.col2im_add(g, batch, c, hw, hw, kh, kh, stride, pad)
        _check_close(back_np, back_nb, f"col2im {label}")
    t_np = _time(lambda: _col2im_add_numpy(g, batch, c, hw, hw, kh, kh,
                                           stride, pad), repeats)
    t_nb = (_time(lambda: nb.col2im_add(g, batch, c, hw, hw, kh, kh,
                                        stride, pad), repeats)
            if nb is not None else float("nan"))
    rows.append((f"col2im   {label}", t_np, t_nb))
    return rows


def bench_median(batch, repeats, rng):
    x = rng.random((batch, 3, 32, 32)).astype(np.float32)
    m_np = _median_blur_numpy(x, 3)
    if nb is not None:
        _check_close(m_np, nb.median_blur(x, 3), "median_blur")
    t_np = _time(lambda: _median_blur_numpy(x, 3), repeats)
    t_nb = (_time(lambda: nb.median_blur(x, 3), repeats)
            if nb is not None else float("nan"))
    return [("median3  3ch 32px", t_np, t_nb)]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--repeats", type=int, default=30)
    args = ap.parse_args()

    print(f"active backend for library code: {kernels.backend_name()}")
    if nb is None:
        print("numba not importable; timing the numpy path only\n")
    rng = np.random.default_rng(0)

    rows = []
    for case in CONV_CASES:
        rows += bench_conv_case(*case, args.batch, args.repeats, rng)
    rows += bench_median(args.batch, args.repeats, rng)

    w = max(len(r[0]) for r in rows)
    print(f"{'kernel / workload':<{w}}  {'numpy ms':>9}  {'numba ms':>9}  {'speedup':>7}")
    for label, t_np, t_nb in rows:
        ratio = f"{t_np / t_nb:6.2f}x" if t_nb == t_nb else "    n/a"
        print(f"{label:<{w}}  {t_np:9.3f}  {t_nb:9.3f}  {ratio}")


if __name__ == "__main__":
    main()
