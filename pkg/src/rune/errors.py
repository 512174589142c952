"""Exception hierarchy shared by every part of the toolchain."""


class RuneError(Exception):
    """Base class for all toolchain errors."""


# -- Runefile ---------------------------------------------------------------

class RunefileError(RuneError):
    """A Runefile problem that can be pinned to a source line."""

    def __init__(self, message, line=None, col=None):
        self.message = message
        self.line = line
        self.col = col
        super().__init__(self._format())

    def _format(self):
        if self.line is None:
            return self.message
        if self.col is None:
            return f"line {self.line}: {self.message}"
        return f"line {self.line}, col {self.col}: {self.message}"


class RunefileSyntaxError(RunefileError):
    pass


class MissingBase(RunefileError):
    pass


class DuplicateInstruction(RunefileError):
    pass


class UnknownInstruction(RunefileError):
    pass


class DuplicateName(RunefileError):
    pass


class UnresolvedName(RunefileError):
    def __init__(self, name, line=None):
        self.name = name
        super().__init__(f"unresolved name {name!r}", line)


class ShapeMismatch(RunefileError):
    def __init__(self, stage_a, stage_b, shape_a, shape_b, line=None):
        self.stage_a = stage_a
        self.stage_b = stage_b
        self.shape_a = tuple(shape_a)
        self.shape_b = tuple(shape_b)
        super().__init__(
            f"stage {stage_a!r} produces {list(self.shape_a)} but "
            f"{stage_b!r} expects {list(self.shape_b)}",
            line,
        )


class NoCapabilitySource(RunefileError):
    pass


class UnknownBlock(RunefileError):
    pass


# -- bundle / tensors -------------------------------------------------------

class BundleError(RuneError):
    pass


class BadMagic(BundleError):
    pass


class UnsupportedVersion(BundleError):
    pass


class DigestMismatch(BundleError):
    pass


class Truncated(BundleError):
    pass


class DanglingReference(BundleError):
    pass


class Malformed(RuneError):
    """Undecodable tensor stream; ``offset`` is where decoding gave up."""

    def __init__(self, offset, reason="malformed tensor encoding"):
        self.offset = offset
        self.reason = reason
        super().__init__(f"{reason} at offset {offset}")


class ModelFormatError(RuneError):
    pass


# -- runtime ----------------------------------------------------------------

class RuntimeFault(RuneError):
    pass


class CapabilityDenied(RuntimeFault):
    def __init__(self, kind):
        self.kind = kind
        super().__init__(f"capability denied: {getattr(kind, 'name', kind)}")


class InsufficientMemory(RuntimeFault):
    def __init__(self, required, budget):
        self.required = required
        self.budget = budget
        super().__init__(f"rune needs {required} bytes, device budget is {budget}")


class NotManifested(RuntimeFault):
    pass


class PermissionViolation(RuntimeFault):
    def __init__(self, kind):
        self.kind = kind
        super().__init__(f"permission violation: read of ungranted capability "
                         f"{getattr(kind, 'name', kind)}")


class EmptyPipeline(RuntimeFault):
    pass


class StageError(RuntimeFault):
    pass


# -- forge ------------------------------------------------------------------

class ModelNotFound(RuneError):
    def __init__(self, path):
        self.path = path
        super().__init__(f"model not found: {path}")


# -- deploy -----------------------------------------------------------------

class DeployError(RuneError):
    pass


class TargetUnreachable(DeployError):
    pass


class ProviderMismatch(DeployError):
    pass


class TransferCorrupt(DeployError):
    pass


class NoRuneDeployed(DeployError):
    pass


class ProtocolError(DeployError):
    pass


class RemoteError(DeployError):
    """An ERROR frame from the device that maps to no more specific class."""


# -- bench ------------------------------------------------------------------

class NonPositiveBaseline(RuneError):
    pass
