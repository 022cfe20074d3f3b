from .counterfactual import (
    CounterfactualQuery,
    EmptyCandidateRoles,
    GlobalRoleTable,
    Provenance,
    UserContext,
    build_candidate_roles,
    build_global_role_table,
    sample_counterfactuals,
)
from .mock import MockReasoner, OracleTable, ReasonConfig, ReasonerOutput, merge_outputs, reason_user
from .records import PromptRecord, Task, parse_record

__all__ = [
    "CounterfactualQuery",
    "EmptyCandidateRoles",
    "GlobalRoleTable",
    "MockReasoner",
    "OracleTable",
    "PromptRecord",
    "Provenance",
    "ReasonConfig",
    "ReasonerOutput",
    "Task",
    "UserContext",
    "build_candidate_roles",
    "build_global_role_table",
    "merge_outputs",
    "parse_record",
    "reason_user",
    "sample_counterfactuals",
]
