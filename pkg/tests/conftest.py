import sys
from pathlib import Path

import pytest

from rune import kernels
from rune.forge import compile_text

ROOT = Path(__file__).resolve().parent.parent
RUNES = ROOT / "runes"

sys.path.insert(0, str(Path(__file__).resolve().parent))


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    """Each importable kernel backend in turn."""
    return kernels.load_backend(request.param)


@pytest.fixture(scope="session")
def microspeech_dir():
    return RUNES / "microspeech"


@pytest.fixture(scope="session")
def sine_dir():
    return RUNES / "sine"


@pytest.fixture(scope="session")
def microspeech_bundle(microspeech_dir):
    data, _ = compile_text((microspeech_dir / "Runefile").read_text(), microspeech_dir)
    return data


@pytest.fixture(scope="session")
def sine_bundle(sine_dir):
    data, _ = compile_text((sine_dir / "Runefile").read_text(), sine_dir)
    return data


@pytest.fixture
def microspeech_file(tmp_path, microspeech_bundle):
    path = tmp_path / "microspeech.rune"
    path.write_bytes(microspeech_bundle)
    return path
