"""``rune build``: compile a Runefile and its models into a ``.rune`` bundle."""
import json
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import click

from rune import runefile
from rune.bundle import (
    CapabilityRequest,
    Instruction,
    Manifest,
    ModelInfo,
    Op,
    crc32,
    decode_bundle,
    encode_bundle,
)
from rune.errors import ModelFormatError, ModelNotFound, RuneError, RunefileError
from rune.pipeline import BLOCK_IDS, RMODEL_MAGIC, load_rmodel
from rune.runefile import StageKind


@dataclass
class BuildReport:
    bundle_path: str
    bundle_size_bytes: int
    manifest: dict
    warnings: list = field(default_factory=list)

    def to_dict(self):
        return {
            "bundle_path": self.bundle_path,
            "bundle_size_bytes": self.bundle_size_bytes,
            "manifest": self.manifest,
            "warnings": list(self.warnings),
        }


def manifest_for(ast, digests):
    """Manifest implied by a parsed Runefile, given one blob digest per model."""
    caps = tuple(
        CapabilityRequest(c.kind, c.name, dict(c.params), dict(c.extras))
        for c in ast.capabilities
    )
    models = tuple(
        ModelInfo(m.name, m.input_shape, m.output_shape, d)
        for m, d in zip(ast.models, digests)
    )
    return Manifest(caps, ast.out, models)


def compile_program(ast, graph):
    model_index = {m.name: i for i, m in enumerate(ast.models)}
    program = []
    for stage in graph.stages:
        if stage.kind == StageKind.CAPABILITY:
            program.append(Instruction(Op.READ_CAP, stage.decl.kind))
        elif stage.kind == StageKind.PROC_BLOCK:
            program.append(Instruction(Op.PROC, BLOCK_IDS[stage.decl.source]))
        else:
            program.append(Instruction(Op.INFER, model_index[stage.name]))
    program.append(Instruction(Op.WRITE_OUT))
    return tuple(program)


def read_model(decl, base_dir):
    path = Path(base_dir) / decl.path
    try:
        blob = path.read_bytes()
    except (FileNotFoundError, IsADirectoryError, NotADirectoryError):
        raise ModelNotFound(decl.path) from None
    if not blob.startswith(RMODEL_MAGIC):
        raise ModelFormatError(
            f"{decl.path}: unsupported model format; only .rmodel dense networks "
            f"(RMDL magic) can be bundled")
    model = load_rmodel(blob)
    if model.n_in != math.prod(decl.input_shape):
        raise ModelFormatError(
            f"{decl.path}: model takes {model.n_in} inputs, Runefile declares "
            f"{list(decl.input_shape)}")
    if model.n_out != math.prod(decl.output_shape):
        raise ModelFormatError(
            f"{decl.path}: model produces {model.n_out} outputs, Runefile declares "
            f"{list(decl.output_shape)}")
    return blob


def compile_text(text, base_dir="."):
    """Runefile source -> (bundle bytes, ast). Nothing is written."""
    ast = runefile.parse(text)
    graph = runefile.analyze(ast)
    blobs = [read_model(m, base_dir) for m in ast.models]
    manifest = manifest_for(ast, [crc32(b) for b in blobs])
    data = encode_bundle(manifest, compile_program(ast, graph), blobs)
    return data, ast


def summarize(manifest):
    return {
        "capabilities": [
            {"kind": c.kind.name, "name": c.name, "params": dict(c.params),
             "extras": dict(c.extras)}
            for c in manifest.capabilities
        ],
        "out": manifest.out.name,
        "models": [
            {"name": m.name, "input": list(m.input_shape), "output": list(m.output_shape),
             "digest": f"{m.digest:08x}"}
            for m in manifest.models
        ],
    }


def default_output(runefile_path):
    p = Path(runefile_path)
    return p.with_name(p.stem + ".rune")


def build(runefile_path, output_path=None):
    runefile_path = Path(runefile_path)
    text = runefile_path.read_text(encoding="utf-8")
    data, ast = compile_text(text, runefile_path.parent)
    out = Path(output_path) if output_path is not None else default_output(runefile_path)
    # write-then-rename so a failed build never leaves a partial bundle behind
    fd, tmp = tempfile.mkstemp(prefix=".rune-", dir=out.parent if str(out.parent) else ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, out)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    manifest = decode_bundle(data).manifest
    return BuildReport(str(out), out.stat().st_size, summarize(manifest), list(ast.warnings))


# -- CLI --------------------------------------------------------------------

@click.group()
def cli():
    """Rune container toolchain."""


@cli.command("build")
@click.argument("runefile_path", metavar="RUNEFILE", type=click.Path(dir_okay=False))
@click.option("-o", "--output", "output", type=click.Path(dir_okay=False),
              help="Bundle path (default: <runefile-dir>/<stem>.rune).")
@click.option("--json", "as_json", is_flag=True, help="Print a machine-readable report.")
def build_cmd(runefile_path, output, as_json):
    """Compile RUNEFILE into a .rune bundle."""
    try:
        report = build(runefile_path, output)
    except RunefileError as exc:
        line = f":{exc.line}" if exc.line is not None else ""
        click.echo(f"{runefile_path}{line}: error: {exc.message}", err=True)
        sys.exit(1)
    except (RuneError, OSError) as exc:
        click.echo(f"{runefile_path}: error: {exc}", err=True)
        sys.exit(1)
    for w in report.warnings:
        click.echo(f"{runefile_path}: warning: {w}", err=True)
    if as_json:
        click.echo(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    else:
        click.echo(f"built {report.bundle_path} ({report.bundle_size_bytes} bytes)")


@cli.command("inspect")
@click.argument("bundle_path", metavar="RUNE", type=click.Path(dir_okay=False, exists=True))
def inspect_cmd(bundle_path):
    """Print the manifest and bytecode of a bundle."""
    try:
        bundle = decode_bundle(Path(bundle_path).read_bytes())
    except RuneError as exc:
        click.echo(f"{bundle_path}: error: {exc}", err=True)
        sys.exit(1)
    click.echo(json.dumps(summarize(bundle.manifest), indent=2, sort_keys=True))
    for i, ins in enumerate(bundle.bytecode):
        click.echo(f"{i:4d}  {ins}")


def run_cli(group, argv=None):
    """Run a click group mapping failures onto exit codes 0 / 1 / 2."""
    try:
        group.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.Abort:
        return 1
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    except Exception as exc:  # noqa: BLE001 - last-resort internal error
        click.echo(f"internal error: {type(exc).__name__}: {exc}", err=True)
        return 2
    return 0


def main(argv=None):
    sys.exit(run_cli(cli, argv))


if __name__ == "__main__":
    main()
