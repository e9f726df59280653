"""Exception hierarchy shared across the package."""

from __future__ import annotations


class RelSearchError(Exception):
    pass


# --- relational store ---------------------------------------------------

class ManifestError(RelSearchError):
    pass


class MissingTable(RelSearchError):
    pass


class MissingColumn(RelSearchError):
    pass


class CutoffViolation(RelSearchError):
    pass


class ReadOnlyViolation(RelSearchError):
    pass


class SqlError(RelSearchError):
    def __init__(self, message: str, query_name: str | None = None):
        self.query_name = query_name
        if query_name:
            message = f"[{query_name}] {message}"
        super().__init__(message)


class QueryTimeout(RelSearchError):
    def __init__(self, message: str, query_name: str | None = None):
        self.query_name = query_name
        if query_name:
            message = f"[{query_name}] {message}"
        super().__init__(message)


# --- feature programs ---------------------------------------------------

class ProgramError(RelSearchError):
    """Malformed feature program document."""


class JsonError(ProgramError):
    pass


class DuplicateName(ProgramError):
    pass


class EmptyProgram(ProgramError):
    pass


class AnchoringError(ProgramError):
    pass


class DuplicateRowId(SqlError):
    pass


# --- learner ------------------------------------------------------------

class LearnerError(RelSearchError):
    pass


class ObjectiveMismatch(LearnerError):
    pass


class DegenerateInput(LearnerError):
    pass


class TransformDomain(LearnerError):
    pass


class TrainingError(LearnerError):
    pass


class SchemaMismatch(LearnerError):
    pass


# --- metrics ------------------------------------------------------------

class MetricError(RelSearchError):
    pass


class SingleClass(MetricError):
    pass


class EmptyInput(MetricError):
    pass


class KeyMismatch(MetricError):
    pass


class NonpositiveBaseline(MetricError):
    pass


# --- workspace / selection ----------------------------------------------

class DuplicateTrialId(RelSearchError):
    pass


class NoSuccessfulTrial(RelSearchError):
    pass


class DeploymentError(RelSearchError):
    def __init__(self, kind: str, message: str):
        self.kind = kind
        super().__init__(f"{kind}: {message}")


# --- synthetic benchmarks -----------------------------------------------

class DegenerateLabels(RelSearchError):
    pass


# --- agent --------------------------------------------------------------

class PolicyTimeout(RelSearchError):
    pass


class TransportError(RelSearchError):
    pass
