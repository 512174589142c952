import json
import shutil

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from rune import forge, runefile
from rune.bundle import decode_bundle
from rune.errors import ModelFormatError, ModelNotFound
from rune.forge import build, compile_text, manifest_for, run_cli
from rune.pipeline import Activation, DenseModel, Layer, dump_rmodel
from rune.runefile import CapabilityKind, OutputKind


def rune(argv):
    return run_cli(forge.cli, argv)


@pytest.fixture
def project(tmp_path, microspeech_dir):
    for name in ("Runefile", "tone_detector.rmodel"):
        shutil.copy(microspeech_dir / name, tmp_path / name)
    return tmp_path


def test_example_project_builds(project):
    report = build(project / "Runefile")
    assert report.bundle_path == str(project / "Runefile.rune")
    data = (project / "Runefile.rune").read_bytes()
    assert report.bundle_size_bytes == len(data)
    m = decode_bundle(data).manifest
    (cap,) = m.capabilities
    assert cap.kind == CapabilityKind.AUDIO
    assert cap.params["hz"] == 16000 and cap.params["samples"] == 150
    assert m.out == OutputKind.SERIAL
    assert len(m.models) == 1
    assert report.manifest["capabilities"][0]["kind"] == "AUDIO"


def test_default_output_uses_stem(tmp_path, sine_dir):
    shutil.copy(sine_dir / "sine.rmodel", tmp_path)
    (tmp_path / "sine.Runefile").write_text((sine_dir / "Runefile").read_text())
    assert build(tmp_path / "sine.Runefile").bundle_path == str(tmp_path / "sine.rune")


def test_build_deterministic(project):
    a = build(project / "Runefile", project / "a.rune")
    b = build(project / "Runefile", project / "b.rune")
    assert (project / "a.rune").read_bytes() == (project / "b.rune").read_bytes()
    assert a.bundle_size_bytes == b.bundle_size_bytes


def test_bundle_has_no_host_paths(project):
    build(project / "Runefile", project / "out.rune")
    assert str(project).encode() not in (project / "out.rune").read_bytes()


def test_missing_model(project, capsys):
    text = (project / "Runefile").read_text().replace("tone_detector", "absent")
    (project / "Runefile").write_text(text)
    with pytest.raises(ModelNotFound):
        build(project / "Runefile")
    assert rune(["build", str(project / "Runefile")]) == 1
    assert not (project / "Runefile.rune").exists()
    assert "absent.rmodel" in capsys.readouterr().err
    assert [p.name for p in project.iterdir() if p.name.startswith(".rune-")] == []


def test_tflite_rejected(project):
    (project / "model.tflite").write_bytes(b"\x1c\x00\x00\x00TFL3" + bytes(64))
    text = (project / "Runefile").read_text().replace("./tone_detector.rmodel", "./model.tflite")
    (project / "Runefile").write_text(text)
    with pytest.raises(ModelFormatError, match=r"\.rmodel"):
        build(project / "Runefile")


def test_model_dims_must_match_declaration(project):
    text = (project / "Runefile").read_text().replace("--output 1", "--output [2]")
    (project / "Runefile").write_text(text)
    with pytest.raises(ModelFormatError):
        build(project / "Runefile")


def test_cli_success_and_json(project, capsys):
    assert rune(["build", str(project / "Runefile"), "-o", str(project / "x.rune"), "--json"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["bundle_size_bytes"] == (project / "x.rune").stat().st_size
    assert report["manifest"]["out"] == "SERIAL"


def test_cli_parse_error_has_file_and_line(project, capsys):
    (project / "Runefile").write_text("FROM runicos/base\nBOGUS\n")
    assert rune(["build", str(project / "Runefile")]) == 1
    err = capsys.readouterr().err
    assert f"{project / 'Runefile'}:2: error:" in err
    assert not (project / "Runefile.rune").exists()


def test_cli_warnings_go_to_stderr(project, capsys):
    text = (project / "Runefile").read_text().replace("--sample-size 1500",
                                                      "--sample-size 1500 --gain 2")
    (project / "Runefile").write_text(text)
    assert rune(["build", str(project / "Runefile")]) == 0
    captured = capsys.readouterr()
    assert "warning:" in captured.err and "--gain" in captured.err
    assert "warning:" not in captured.out


def test_cli_usage_error_exit_code(capsys):
    assert rune(["build"]) != 0
    assert rune(["frobnicate"]) != 0


def test_cli_inspect(project, capsys):
    build(project / "Runefile", project / "x.rune")
    assert rune(["inspect", str(project / "x.rune")]) == 0
    out = capsys.readouterr().out
    assert "READ_CAP AUDIO" in out and "PROC FFT" in out and "WRITE_OUT" in out


def test_exit_zero_iff_written(project):
    out = project / "y.rune"
    assert rune(["build", str(project / "Runefile"), "-o", str(out)]) == 0
    assert out.exists()


# -- compile / decode coherence over generated Runefiles --------------------

@st.composite
def runefiles(draw):
    kind = draw(st.sampled_from(["AUDIO", "RAND"]))
    samples = draw(st.integers(1, 32))
    flags = f"--samples {samples}"
    if kind == "AUDIO":
        flags = f"--hz {draw(st.integers(1, 48000))} " + flags
    if draw(st.booleans()):
        flags += f" --extra-{draw(st.integers(0, 9))} {draw(st.integers(1, 99))}"
    block = draw(st.sampled_from([None, "runicos/fft", "runicos/normalize"]))
    n_out = draw(st.integers(1, 8))
    lines = ["FROM runicos/base", f"CAPABILITY {kind} src {flags}"]
    run = ["src"]
    if block:
        lines.append(f"PROC_BLOCK {block} blk")
        run.append("blk")
    lines += [f"MODEL ./net.rmodel net --input [{samples},1] --output [{n_out}]",
              "RUN " + " ".join(run + ["net"]), "OUT serial"]
    return "\n".join(lines) + "\n", samples, n_out


@settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(runefiles())
def test_manifest_coherence(tmp_path, case):
    text, n_in, n_out = case
    rng = np.random.default_rng(n_in * 31 + n_out)
    model = DenseModel([Layer(rng.standard_normal((n_out, n_in)).astype("<f4"),
                              np.zeros(n_out, "<f4"), Activation.TANH)])
    (tmp_path / "net.rmodel").write_bytes(dump_rmodel(model))
    data, ast = compile_text(text, tmp_path)
    bundle = decode_bundle(data)
    assert ast == runefile.parse(text)
    assert bundle.manifest == manifest_for(ast, [bundle.model_blobs[0][0]])
