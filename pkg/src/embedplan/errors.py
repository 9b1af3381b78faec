"""Exception hierarchy shared across the pipeline."""


class EmbedPlanError(Exception):
    """Base class for all package errors."""


# --- pddl ---

class ParseError(EmbedPlanError):
    def __init__(self, message, line=None):
        loc = f"line {line}: " if line is not None else ""
        super().__init__(f"{loc}{message}")
        self.line = line


class UnsupportedFeature(EmbedPlanError):
    pass


class TypeMismatch(EmbedPlanError):
    pass


class GroundingExplosion(EmbedPlanError):
    pass


# --- world ---

class StateCapExceeded(EmbedPlanError):
    pass


class GoalUnreachable(EmbedPlanError):
    pass


class StateIdCollision(EmbedPlanError):
    pass


class MissingTemplate(EmbedPlanError):
    pass


# --- embed ---

class FormatError(EmbedPlanError):
    pass


class DimensionMismatch(EmbedPlanError):
    pass


class MissingText(EmbedPlanError):
    pass


# --- model ---

class BudgetExceeded(EmbedPlanError):
    pass


class NonFiniteActivation(EmbedPlanError):
    pass


# --- train ---

class EmptySplit(EmbedPlanError):
    pass


class NoApplicableActions(EmbedPlanError):
    pass


# --- protocols ---

class TooFewTransitions(EmbedPlanError):
    pass


class NoMultiPlanProblems(EmbedPlanError):
    pass


class TooFewProblems(EmbedPlanError):
    pass


class SameDomain(EmbedPlanError):
    pass


class UnknownDomain(EmbedPlanError):
    pass


# --- eval ---

class MissingModel(EmbedPlanError):
    pass


class DegenerateVariance(EmbedPlanError):
    pass


class ConstantInput(EmbedPlanError):
    pass


# --- cli ---

class StaleArtifact(EmbedPlanError):
    pass
