"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures to a
documented process status without a lookup table of its own.
"""


class MetaTeamError(Exception):
    """Base class for all meta-team errors."""

    exit_code = 1


# Scaffold store


class ScaffoldError(MetaTeamError):
    exit_code = 2


class MissingManifest(ScaffoldError):
    """The team root lacks ``team.yaml`` or ``constitution.md``."""


class MalformedAgentDir(ScaffoldError):
    def __init__(self, name: str, detail: str):
        super().__init__(f"agent directory '{name}' is malformed: {detail}")
        self.name = name
        self.detail = detail


class DuplicateAgentName(ScaffoldError):
    def __init__(self, name: str):
        super().__init__(f"duplicate agent name: {name}")
        self.name = name


class UnknownSkill(ScaffoldError):
    def __init__(self, agent: str, skill: str):
        super().__init__(f"agent '{agent}' has no skill '{skill}'")
        self.agent = agent
        self.skill = skill


class ScaffoldFormatError(ScaffoldError):
    def __init__(self, file: str, line: int, detail: str):
        super().__init__(f"{file}:{line}: {detail}")
        self.file = file
        self.line = line
        self.detail = detail


class PersistFailure(ScaffoldError):
    """A commit could not be written; the previous version is left in place."""


class UnknownBudgetProfile(ScaffoldError):
    def __init__(self, name: str, known: list[str]):
        super().__init__(f"unknown budget profile '{name}' (known: {', '.join(known)})")
        self.name = name


# Runtime bus


class RuntimeBusError(MetaTeamError):
    exit_code = 1


class UnknownAgent(RuntimeBusError):
    def __init__(self, name: str):
        super().__init__(f"unknown agent: {name}")
        self.name = name


class AlreadyActive(RuntimeBusError):
    def __init__(self, name: str):
        super().__init__(f"agent already active: {name}")
        self.name = name


class NotActive(RuntimeBusError):
    def __init__(self, name: str):
        super().__init__(f"agent not active: {name}")
        self.name = name


class UnknownRecipient(RuntimeBusError):
    def __init__(self, name: str):
        super().__init__(f"unknown recipient: {name}")
        self.name = name


class AlreadyFinalized(RuntimeBusError):
    """The episode already has an outcome."""


class MalformedHistory(RuntimeBusError):
    """A tool result appears without its preceding tool call."""


class UnknownTool(RuntimeBusError):
    def __init__(self, name: str):
        super().__init__(f"unknown tool: {name}")
        self.name = name


class BudgetExhausted(RuntimeBusError):
    """Raised to tools that would spend further after a limit was reached."""


# Trace store


class TraceError(MetaTeamError):
    exit_code = 3


class SchemaError(TraceError):
    def __init__(self, detail: str, line: int | None = None, field: str | None = None):
        where = f"line {line}: " if line is not None else ""
        what = f"field '{field}': " if field else ""
        super().__init__(f"{where}{what}{detail}")
        self.line = line
        self.field = field
        self.detail = detail


class ImmutableExperience(TraceError):
    """A frozen experience cannot be changed or overwritten."""


# Model gateway


class GatewayError(MetaTeamError):
    exit_code = 4


class GatewayUnavailable(GatewayError):
    """All retry attempts failed."""


class NonRetryable(GatewayError):
    """The backend rejected the request (authentication, malformed request)."""


class ProtocolError(NonRetryable):
    """The backend answered with something the protocol forbids."""


class ScriptExhausted(GatewayError):
    def __init__(self, agent: str, step: int):
        super().__init__(f"no scripted response for ({agent}, {step}) and no default")
        self.agent = agent
        self.step = step


class UnknownModel(GatewayError):
    def __init__(self, model: str):
        super().__init__(f"no price for model '{model}'")
        self.model = model


# Attribution


class AttributionError(MetaTeamError):
    exit_code = 1


class ParseFailure(AttributionError):
    """A model response did not contain the expected structured fields."""


class LengthMismatch(AttributionError):
    """Verdict and ground-truth lists differ in length (or are empty)."""


# Evolution


class EvolutionError(MetaTeamError):
    exit_code = 1


class ReflectionTimeout(EvolutionError):
    """A reflection phase exceeded its timeout."""


class ReflectionBudgetExceeded(EvolutionError):
    """A reflection spent more than its cost cap or step budget."""


class GateRejected(EvolutionError):
    exit_code = 6

    def __init__(self, failed: list[str]):
        super().__init__(f"commit gate rejected update: {', '.join(failed)}")
        self.failed = failed


# Evaluation


class EvaluatorFailure(MetaTeamError):
    exit_code = 5
