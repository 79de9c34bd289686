"""Compare the compiled and pure-Python association kernels.

Usage::

    python benchmarks/bench_kernels.py [--sizes 8,32,128] [--repeat 5] [--json out.json]

Times 2D IoU matrices, 3D IoU matrices and the assignment solver on random
inputs of each size, checks the two backends agree, and prints a table of
best-of-``repeat`` wall times and speedups.
"""
import argparse
import json
import sys
import timeit

import numpy as np

from sglkf import _kernels_py

try:
    from sglkf import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None


def _boxes_2d(rng, n):
    return np.column_stack([rng.uniform(0, 1000, (n, 2)), rng.uniform(10, 120, (n, 2))])


def _boxes_3d(rng, n):
    return np.column_stack([rng.uniform(-40, 40, (n, 3)), rng.uniform(1, 5, (n, 3))])


def cases(rng, n):
    a2, b2 = _boxes_2d(rng, n), _boxes_2d(rng, n)
    a3, b3 = _boxes_3d(rng, n), _boxes_3d(rng, n)
    cost = rng.random((n, n + n // 4))
    return {
        "iou_2d": ("iou_matrix_2d", (a2, b2)),
        "iou_3d": ("iou_matrix_3d", (a3, b3)),
        "assignment": ("linear_sum_assignment", (cost,)),
    }


def best_time(fn, args, repeat):
    number = 1
    while timeit.timeit(lambda: fn(*args), number=number) < 0.05 and number < 10_000:
        number *= 4
    return min(timeit.repeat(lambda: fn(*args), number=number, repeat=repeat)) / number


def run(sizes, repeat, seed=0):
    rng = np.random.default_rng(seed)
    rows = []
    for n in sizes:
        for name, (fn_name, args) in cases(rng, n).items():
            py_fn = getattr(_kernels_py, fn_name)
            row = {"kernel": name, "n": n, "python_s": best_time(py_fn, args, repeat)}
            if _compiled is not None:
                cy_fn = getattr(_compiled, fn_name)
                out_py, out_cy = py_fn(*args), cy_fn(*args)
                if isinstance(out_py, tuple):
                    agree = all(np.array_equal(x, y) for x, y in zip(out_py, out_cy))
                else:
                    agree = bool(np.allclose(out_py, out_cy, rtol=0, atol=1e-12))
                row.update(cython_s=best_time(cy_fn, args, repeat), agree=agree)
                row["speedup"] = row["python_s"] / row["cython_s"]
            rows.append(row)
    return rows


def format_table(rows):
    lines = [f"{'kernel':<12}{'n':>6}{'python (ms)':>14}{'cython (ms)':>14}{'speedup':>10}{'agree':>7}"]
    for r in rows:
        cy = f"{1e3 * r['cython_s']:>14.4f}" if "cython_s" in r else f"{'n/a':>14}"
        sp = f"{r['speedup']:>9.1f}x" if "speedup" in r else f"{'':>10}"
        ag = f"{str(r.get('agree', '')):>7}"
        lines.append(f"{r['kernel']:<12}{r['n']:>6}{1e3 * r['python_s']:>14.4f}{cy}{sp}{ag}")
    return "\n".join(lines)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", default="8,32,128", help="comma-separated matrix sizes")
    p.add_argument("--repeat", type=int, default=5, help="timing repeats (best is reported)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", default=None, help="also write rows to this file")
    args = p.parse_args(argv)
    sizes = [int(s) for s in args.sizes.split(",")]
    if _compiled is None:
        print("compiled extension not available; timing the Python backend only", file=sys.stderr)
    rows = run(sizes, args.repeat, args.seed)
    print(format_table(rows))
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0 if all(r.get("agree", True) for r in rows) else 1


if __name__ == "__main__":
    sys.exit(main())
