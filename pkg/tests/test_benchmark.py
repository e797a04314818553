import runpy
import sys
from pathlib import Path


def test_benchmark_runs(monkeypatch, capsys):
    script = Path(__file__).parents[1] / "benchmarks" / "bench_kernels.py"
    monkeypatch.setattr(sys, "argv", [str(script), "--repeat", "1"])
    runpy.run_path(str(script), run_name="__main__")
    out = capsys.readouterr().out.splitlines()
    assert out[0].split()[:3] == ["workload", "numba", "ms"]
    assert len(out) == 6
