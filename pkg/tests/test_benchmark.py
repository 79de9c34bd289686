import importlib.util
import json
import os
import subprocess
import sys

from sglkf import kernels

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def _load_bench():
    spec = importlib.util.spec_from_file_location("bench_kernels", os.path.join(ROOT, "benchmarks", "bench_kernels.py"))
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def test_benchmark_runs_and_backends_agree(tmp_path, capsys):
    bench = _load_bench()
    out = tmp_path / "bench.json"
    assert bench.main(["--sizes", "4,9", "--repeat", "1", "--json", str(out)]) == 0
    rows = json.loads(out.read_text())
    assert {r["kernel"] for r in rows} == {"iou_2d", "iou_3d", "assignment"}
    assert "speedup" in capsys.readouterr().out


def test_backend_selected_at_import():
    assert kernels.BACKEND in ("cython", "python")
    code = "from sglkf import kernels; print(kernels.BACKEND)"
    env = dict(os.environ, SGLKF_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
