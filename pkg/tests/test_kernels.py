import os
import subprocess
import sys
from pathlib import Path

import pytest

from rune import kernels


def test_backend_selected():
    assert kernels.BACKEND in kernels.available_backends()
    assert "python" in kernels.available_backends()


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.load_backend("fortran")


def test_env_forces_fallback():
    env = dict(os.environ, RUNE_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from rune import kernels; print(kernels.BACKEND)"],
                         capture_output=True, text=True, env=env, check=True)
    assert out.stdout.strip() == "python"


def test_pipeline_agrees_across_backends(sine_bundle, microspeech_bundle, tmp_path):
    if len(kernels.available_backends()) < 2:
        pytest.skip("compiled backend not built")
    code = (
        "import sys\n"
        "from rune import runicos\n"
        "from rune.tensor import Codec\n"
        "inst = runicos.load(open(sys.argv[1], 'rb').read(), "
        "runicos.simulated_device('d', seed=2))\n"
        "inst.manifest()\n"
        "for i in range(20):\n"
        "    outs = []\n"
        "    for c in Codec:\n"
        "        inst.reseed(i)\n"
        "        outs.append(inst.call(c))\n"
        "    assert outs[0] == outs[1]\n"
        "    print(outs[0].tolist()[0])\n"
    )
    for data in (sine_bundle, microspeech_bundle):
        path = tmp_path / "b.rune"
        path.write_bytes(data)
        runs = []
        for flag in ("0", "1"):
            env = dict(os.environ, RUNE_PURE_PYTHON=flag)
            proc = subprocess.run([sys.executable, "-c", code, str(path)], capture_output=True,
                                  text=True, env=env, check=True)
            runs.append([float(v) for v in proc.stdout.split()])
        # same f32 arithmetic, different summation order: agree to rounding
        assert max(abs(a - b) for a, b in zip(*runs)) < 1e-5


def test_kernel_benchmark_script_runs():
    script = Path(__file__).resolve().parent.parent / "benchmarks" / "bench_kernels.py"
    out = subprocess.run([sys.executable, str(script), "--number", "5"],
                         capture_output=True, text=True, timeout=120)
    assert out.returncode == 0, out.stderr
    assert "fft_magnitude n=1024" in out.stdout
