"""Runefile front-end: parse, render and shape-check the pipeline declaration.

A Runefile is line oriented::

    FROM runicos/base
    CAPABILITY AUDIO audio --hz 16000 --samples 150 --sample-size 1500
    PROC_BLOCK runicos/fft fft
    MODEL ./sine.rmodel model --input [150,1] --output 1
    RUN audio fft model
    OUT serial

``#`` starts a comment that runs to the end of the line.
"""
import enum
import re
from dataclasses import dataclass, field

from rune.errors import (
    DuplicateInstruction,
    DuplicateName,
    MissingBase,
    NoCapabilitySource,
    RunefileSyntaxError,
    ShapeMismatch,
    UnknownBlock,
    UnknownInstruction,
    UnresolvedName,
)
from rune.pipeline import BLOCK_IDS

BASE_IMAGE = "runicos/base"

IDENT = re.compile(r"[a-zA-Z_][a-zA-Z0-9_-]*\Z")
SHAPE = re.compile(r"\[(\d+(?:,\d+)*)\]\Z")
INTEGER = re.compile(r"[+-]?\d+\Z")
REGISTRY_PATH = re.compile(r"[a-zA-Z0-9_.-]+(?:/[a-zA-Z0-9_.-]+)+\Z")


class CapabilityKind(enum.IntEnum):
    AUDIO = 0
    RAND = 1


class OutputKind(enum.IntEnum):
    SERIAL = 0


KNOWN_FLAGS = {
    CapabilityKind.AUDIO: ("hz", "samples", "sample-size"),
    CapabilityKind.RAND: ("samples",),
}
REQUIRED_FLAGS = {
    CapabilityKind.AUDIO: ("hz", "samples"),
    CapabilityKind.RAND: (),
}


@dataclass(frozen=True)
class CapabilityDecl:
    kind: CapabilityKind
    name: str
    params: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)
    line: int = field(default=0, compare=False)

    @property
    def samples(self):
        return self.params.get("samples", 1)


@dataclass(frozen=True)
class ProcBlockDecl:
    source: str
    name: str
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class ModelDecl:
    path: str
    name: str
    input_shape: tuple
    output_shape: tuple
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class RunefileAst:
    base: str
    capabilities: tuple
    proc_blocks: tuple
    models: tuple
    run: tuple
    out: OutputKind
    run_line: int = field(default=0, compare=False)
    warnings: tuple = field(default=(), compare=False)

    def lookup(self, name):
        for decl in (*self.capabilities, *self.proc_blocks, *self.models):
            if decl.name == name:
                return decl
        return None


class StageKind(enum.IntEnum):
    CAPABILITY = 0
    PROC_BLOCK = 1
    MODEL = 2


@dataclass(frozen=True)
class Stage:
    name: str
    kind: StageKind
    input_shape: tuple
    output_shape: tuple
    decl: object = field(compare=False, repr=False, default=None)


@dataclass(frozen=True)
class PipelineGraph:
    stages: tuple
    sink: OutputKind


# -- lexing -----------------------------------------------------------------

@dataclass
class _Token:
    text: str
    col: int


def _tokenize(line):
    return [_Token(m.group(), m.start() + 1) for m in re.finditer(r"\S+", line)]


def _strip_comment(line):
    i = line.find("#")
    return line if i < 0 else line[:i]


def _parse_flags(tokens, lineno):
    """``--key value`` pairs -> {key: value token}, in source order."""
    flags = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.text.startswith("--") or len(tok.text) == 2:
            raise RunefileSyntaxError(f"expected a --flag, got {tok.text!r}", lineno, tok.col)
        key = tok.text[2:]
        if i + 1 >= len(tokens):
            raise RunefileSyntaxError(f"flag --{key} has no value", lineno, tok.col)
        if key in flags:
            raise RunefileSyntaxError(f"flag --{key} given twice", lineno, tok.col)
        flags[key] = tokens[i + 1]
        i += 2
    return flags


def _parse_shape(tok, lineno):
    if INTEGER.match(tok.text):
        dims = (int(tok.text),)
    else:
        m = SHAPE.match(tok.text)
        if not m:
            raise RunefileSyntaxError(f"bad shape literal {tok.text!r}", lineno, tok.col)
        dims = tuple(int(d) for d in m.group(1).split(","))
    if any(d < 1 for d in dims):
        raise RunefileSyntaxError(f"shape dims must be >= 1: {tok.text}", lineno, tok.col)
    return dims


def _ident(tok, lineno):
    if not IDENT.match(tok.text):
        raise RunefileSyntaxError(f"invalid identifier {tok.text!r}", lineno, tok.col)
    return tok.text


# -- parsing ----------------------------------------------------------------

def parse(text):
    """Parse Runefile source into a :class:`RunefileAst`."""
    base = None
    out = None
    run = None
    run_line = 0
    caps, blocks, models, warnings = [], [], [], []
    bound = {}
    seen_first = False
    last_line = 1

    for lineno, raw in enumerate(text.splitlines(), start=1):
        tokens = _tokenize(_strip_comment(raw))
        if not tokens:
            continue
        last_line = lineno
        head, args = tokens[0], tokens[1:]
        keyword = head.text

        if not seen_first:
            seen_first = True
            if keyword != "FROM":
                raise MissingBase("a Runefile must start with FROM", lineno, head.col)

        if keyword == "FROM":
            if base is not None:
                raise DuplicateInstruction("second FROM instruction", lineno, head.col)
            if len(args) != 1:
                raise RunefileSyntaxError("FROM takes exactly one image", lineno, head.col)
            if not REGISTRY_PATH.match(args[0].text):
                raise RunefileSyntaxError(f"bad image path {args[0].text!r}", lineno, args[0].col)
            if args[0].text != BASE_IMAGE:
                raise RunefileSyntaxError(
                    f"unsupported base image {args[0].text!r}; only {BASE_IMAGE} exists",
                    lineno, args[0].col)
            base = args[0].text
            continue

        if keyword == "CAPABILITY":
            decl = _parse_capability(args, lineno, head, warnings)
            caps.append(decl)
        elif keyword == "PROC_BLOCK":
            decl = _parse_proc_block(args, lineno, head)
            blocks.append(decl)
        elif keyword == "MODEL":
            decl = _parse_model(args, lineno, head)
            models.append(decl)
        elif keyword == "RUN":
            if run is not None:
                raise DuplicateInstruction("second RUN instruction", lineno, head.col)
            if not args:
                raise RunefileSyntaxError("RUN needs at least one stage", lineno, head.col)
            run = tuple(_ident(t, lineno) for t in args)
            run_line = lineno
            continue
        elif keyword == "OUT":
            if out is not None:
                raise DuplicateInstruction("second OUT instruction", lineno, head.col)
            if len(args) != 1:
                raise RunefileSyntaxError("OUT takes exactly one sink", lineno, head.col)
            try:
                out = OutputKind[args[0].text.upper()]
            except KeyError:
                raise RunefileSyntaxError(
                    f"unknown output {args[0].text!r}", lineno, args[0].col) from None
            continue
        else:
            raise UnknownInstruction(f"unknown instruction {keyword!r}", lineno, head.col)

        if decl.name in bound:
            raise DuplicateName(
                f"{decl.name!r} already declared on line {bound[decl.name]}", lineno)
        bound[decl.name] = lineno

    if base is None:
        raise MissingBase("a Runefile must start with FROM", last_line)
    if run is None:
        raise RunefileSyntaxError("missing RUN instruction", last_line)
    if out is None:
        raise RunefileSyntaxError("missing OUT instruction", last_line)
    return RunefileAst(base, tuple(caps), tuple(blocks), tuple(models), run, out,
                       run_line=run_line, warnings=tuple(warnings))


def _parse_capability(args, lineno, head, warnings):
    if len(args) < 2:
        raise RunefileSyntaxError("CAPABILITY needs a kind and a name", lineno, head.col)
    try:
        kind = CapabilityKind[args[0].text.upper()]
    except KeyError:
        raise RunefileSyntaxError(
            f"unknown capability kind {args[0].text!r}", lineno, args[0].col) from None
    name = _ident(args[1], lineno)
    params, extras = {}, {}
    for key, tok in _parse_flags(args[2:], lineno).items():
        known = key in KNOWN_FLAGS[kind]
        if INTEGER.match(tok.text):
            value = int(tok.text)
            if value <= 0:
                raise RunefileSyntaxError(
                    f"--{key} must be strictly positive", lineno, tok.col)
            if value > 0xFFFFFFFF:
                raise RunefileSyntaxError(f"--{key} does not fit in 32 bits", lineno, tok.col)
            params[key] = value
        elif known:
            raise RunefileSyntaxError(f"--{key} must be an integer", lineno, tok.col)
        else:
            extras[key] = tok.text
        if not known:
            warnings.append(f"line {lineno}: opaque capability flag --{key} passed through")
    for key in REQUIRED_FLAGS[kind]:
        if key not in params:
            raise RunefileSyntaxError(
                f"{kind.name} capability requires --{key}", lineno, head.col)
    return CapabilityDecl(kind, name, params, extras, line=lineno)


def _parse_proc_block(args, lineno, head):
    if len(args) != 2:
        raise RunefileSyntaxError("PROC_BLOCK takes a source and a name", lineno, head.col)
    source = args[0].text
    if not REGISTRY_PATH.match(source):
        raise RunefileSyntaxError(f"bad block path {source!r}", lineno, args[0].col)
    if source not in BLOCK_IDS:
        raise UnknownBlock(f"unknown processing block {source!r}", lineno, args[0].col)
    return ProcBlockDecl(source, _ident(args[1], lineno), line=lineno)


def _parse_model(args, lineno, head):
    if len(args) < 2:
        raise RunefileSyntaxError("MODEL needs a path and a name", lineno, head.col)
    path = args[0].text
    name = _ident(args[1], lineno)
    flags = _parse_flags(args[2:], lineno)
    for key, tok in flags.items():
        if key not in ("input", "output"):
            raise RunefileSyntaxError(f"unknown MODEL flag --{key}", lineno, tok.col)
    for key in ("input", "output"):
        if key not in flags:
            raise RunefileSyntaxError(f"MODEL requires --{key}", lineno, head.col)
    return ModelDecl(path, name, _parse_shape(flags["input"], lineno),
                     _parse_shape(flags["output"], lineno), line=lineno)


# -- rendering --------------------------------------------------------------

def _shape(dims):
    return "[" + ",".join(str(d) for d in dims) + "]"


def render(ast):
    """Canonical text for ``ast``; ``parse(render(ast)) == ast``."""
    lines = [f"FROM {ast.base}"]
    for c in ast.capabilities:
        flags = [f"--{k} {v}" for k, v in c.params.items()]
        flags += [f"--{k} {v}" for k, v in c.extras.items()]
        lines.append(" ".join(["CAPABILITY", c.kind.name, c.name, *flags]))
    for b in ast.proc_blocks:
        lines.append(f"PROC_BLOCK {b.source} {b.name}")
    for m in ast.models:
        lines.append(f"MODEL {m.path} {m.name} --input {_shape(m.input_shape)} "
                     f"--output {_shape(m.output_shape)}")
    lines.append("RUN " + " ".join(ast.run))
    lines.append(f"OUT {ast.out.name.lower()}")
    return "\n".join(lines) + "\n"


# -- analysis ---------------------------------------------------------------

def squeeze(shape):
    return tuple(d for d in shape if d != 1) or (1,)


def compatible(produced, expected):
    """Shapes match once unit dimensions are dropped."""
    return squeeze(produced) == squeeze(expected)


def capability_shape(decl):
    return (decl.samples, 1)


def stage_output_shape(decl, input_shape):
    """Shape function of one stage; ``input_shape`` is None for sources."""
    if isinstance(decl, CapabilityDecl):
        return capability_shape(decl)
    if isinstance(decl, ProcBlockDecl):
        # both built-in blocks are shape preserving
        return tuple(input_shape)
    return tuple(decl.output_shape)


def analyze(ast):
    """Resolve the RUN chain and infer per-stage shapes."""
    decls = []
    for name in ast.run:
        decl = ast.lookup(name)
        if decl is None:
            raise UnresolvedName(name, ast.run_line)
        decls.append(decl)
    if not isinstance(decls[0], CapabilityDecl):
        raise NoCapabilitySource(
            f"RUN must start with a capability, not {ast.run[0]!r}", ast.run_line)
    for decl in decls[1:]:
        if isinstance(decl, CapabilityDecl):
            raise RunefileSyntaxError(
                f"capability {decl.name!r} may only appear first in RUN", ast.run_line)

    stages = []
    prev = None
    for decl in decls:
        if isinstance(decl, CapabilityDecl):
            stage = Stage(decl.name, StageKind.CAPABILITY, (), capability_shape(decl), decl)
        elif isinstance(decl, ProcBlockDecl):
            stage = Stage(decl.name, StageKind.PROC_BLOCK, prev.output_shape,
                          prev.output_shape, decl)
        else:
            if not compatible(prev.output_shape, decl.input_shape):
                raise ShapeMismatch(prev.name, decl.name, prev.output_shape,
                                    decl.input_shape, ast.run_line)
            stage = Stage(decl.name, StageKind.MODEL, decl.input_shape,
                          decl.output_shape, decl)
        stages.append(stage)
        prev = stage
    return PipelineGraph(tuple(stages), ast.out)


def load(path):
    with open(path, encoding="utf-8") as f:
        return parse(f.read())
