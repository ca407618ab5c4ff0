"""Core data model: trials, feature ideas, feature plans, built values, proposals.

Everything here is an immutable value object; the operations are pure functions.
Feature names are the identity key across the whole pipeline.
"""

from __future__ import annotations

import csv
import datetime as dt
import re
from dataclasses import dataclass, field

FEATURE_NAME_RE = re.compile(r"[a-z][a-z0-9_]*\Z")

FEATURE_TYPES = ("integer", "float", "boolean", "categorical", "multicategorical")
DATA_SOURCES = ("pubmed", "current_trial_summary", "related_clinical_trials")
PHASES = ("I", "II", "III", "IV")
METRICS = ("roc_auc", "pr_auc", "f1")

# Reason codes attached to None-valued entries.
REASON_MISSING = "MISSING"
REASON_NOT_IN_CATEGORIES = "NOT_IN_CATEGORIES"
REASON_TYPE_MISMATCH = "TYPE_MISMATCH"
REASON_AGENT_FAILURE = "AGENT_FAILURE"


class DomainError(Exception):
    """Base class for data-model violations."""


class DuplicateFeature(DomainError):
    pass


class UnknownFeature(DomainError):
    pass


class DatasetError(DomainError):
    """Malformed trial dataset file; message carries the line number."""


@dataclass(frozen=True)
class TrialRecord:
    nct_id: str
    label: int
    start_date: dt.date
    phase: str | None = None


@dataclass(frozen=True)
class TaskSpec:
    description: str
    metric: str = "roc_auc"

    def __post_init__(self) -> None:
        if not self.description.strip():
            raise DomainError("task description must be non-empty")
        if self.metric not in METRICS:
            raise DomainError(f"unknown metric {self.metric!r}")


@dataclass(frozen=True)
class FeatureIdea:
    feature_name: str
    description: str


def normalize_feature_type(raw: str) -> str:
    """Map type labels to the canonical set, tolerating spelling variants.

    Model output occasionally hyphenates compound type names
    (e.g. "multi-categorical"); those are folded into the canonical form.
    """
    canon = str(raw).strip().lower().replace("-", "").replace("_", "").replace(" ", "")
    for t in FEATURE_TYPES:
        if canon == t:
            return t
    return str(raw)


@dataclass(frozen=True)
class FeaturePlan:
    """Executable schema + instructions for building one feature.

    ``feature_type`` maps sub-feature names to type labels; single-valued
    plans conventionally use the sub-feature key "value" (not enforced).
    """

    feature_name: str
    feature_idea: str
    feature_type: dict[str, str]
    data_sources: tuple[str, ...]
    example_values: tuple = ()
    possible_values: dict[str, list[str]] = field(default_factory=dict)
    feature_instructions: str = ""

    def to_dict(self) -> dict:
        return {
            "feature_name": self.feature_name,
            "feature_idea": self.feature_idea,
            "feature_type": dict(self.feature_type),
            "data_sources": list(self.data_sources),
            "example_values": list(self.example_values),
            "possible_values": {k: list(v) for k, v in self.possible_values.items()},
            "feature_instructions": self.feature_instructions,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeaturePlan":
        ftypes = {str(k): normalize_feature_type(v) for k, v in dict(d.get("feature_type") or {}).items()}
        return cls(
            feature_name=str(d.get("feature_name", "")),
            feature_idea=str(d.get("feature_idea", "")),
            feature_type=ftypes,
            data_sources=tuple(str(s) for s in (d.get("data_sources") or [])),
            example_values=tuple(d.get("example_values") or []),
            possible_values={str(k): [str(x) for x in v] for k, v in dict(d.get("possible_values") or {}).items()},
            feature_instructions=str(d.get("feature_instructions", "")),
        )


@dataclass(frozen=True)
class CoercedFeature:
    """Built values for one feature of one trial, after type coercion."""

    values: dict[str, object]  # sub-feature -> typed value or None
    reasons: dict[str, str]  # sub-feature -> reason, only for None entries


@dataclass(frozen=True)
class FeatureValueSet:
    """All built feature values for one trial."""

    nct_id: str
    values: dict[str, dict[str, object]]  # feature -> sub-feature -> value|None
    none_reasons: dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class ProposalAction:
    """One edge in the search tree: Add, Refine or Remove a feature."""

    kind: str  # Add | Refine | Remove
    target_feature: str | None = None
    idea: FeatureIdea | None = None
    origin: str = "model_based"  # model_based | error_based

    def __post_init__(self) -> None:
        if self.kind not in ("Add", "Refine", "Remove"):
            raise DomainError(f"unknown action kind {self.kind!r}")
        if self.kind == "Add" and self.target_feature is not None:
            raise DomainError("Add carries no target_feature")
        if self.kind == "Remove" and self.idea is not None:
            raise DomainError("Remove carries no idea")

    def summary(self) -> str:
        if self.kind == "Add":
            return f"Add {self.idea.feature_name}" if self.idea else "Add"
        return f"{self.kind} {self.target_feature}"

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind, "origin": self.origin}
        if self.target_feature is not None:
            d["target_feature"] = self.target_feature
        if self.idea is not None:
            d["idea"] = {"feature_name": self.idea.feature_name, "description": self.idea.description}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ProposalAction":
        idea = d.get("idea")
        return cls(
            kind=d["kind"],
            target_feature=d.get("target_feature"),
            idea=FeatureIdea(idea["feature_name"], idea.get("description", "")) if idea else None,
            origin=d.get("origin", "model_based"),
        )


@dataclass(frozen=True)
class SearchConfig:
    """Search hyperparameters; the defaults are the reference configuration."""

    rollouts: int = 10
    max_depth: int = 10
    exploration_weight: float = 1.0
    n_factor_pos: int = 3
    n_factor_neg: int = 3
    n_error_examples: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.rollouts < 0 or self.max_depth < 1 or self.exploration_weight < 0:
            raise DomainError("invalid search configuration")


@dataclass(frozen=True)
class Violation:
    code: str
    detail: str


def validate_plan(plan: FeaturePlan) -> list[Violation]:
    """Check a plan against its schema invariants.

    Violations are data, not failures: an empty list means the plan is valid.
    """
    out: list[Violation] = []
    if not plan.feature_name or not FEATURE_NAME_RE.match(plan.feature_name):
        out.append(Violation("BAD_FEATURE_NAME", f"feature_name {plan.feature_name!r} is not snake_case"))
    if not plan.feature_type:
        out.append(Violation("EMPTY_FEATURE_TYPE", "feature_type has no sub-features"))
    for sub, ftype in plan.feature_type.items():
        if ftype not in FEATURE_TYPES:
            out.append(Violation("UNKNOWN_TYPE", f"sub-feature {sub!r} has unknown type {ftype!r}"))
        elif ftype in ("categorical", "multicategorical") and not plan.possible_values.get(sub):
            out.append(Violation("MISSING_CATEGORIES", f"{ftype} sub-feature {sub!r} has empty possible_values"))
    for sub in plan.possible_values:
        if sub not in plan.feature_type:
            out.append(Violation("UNKNOWN_SUBFEATURE", f"possible_values key {sub!r} absent from feature_type"))
    for src in plan.data_sources:
        if src not in DATA_SOURCES:
            out.append(Violation("UNKNOWN_DATA_SOURCE", f"unknown data source {src!r}"))
    return out


def apply_proposal(
    active_plans: dict[str, FeaturePlan],
    action: ProposalAction,
    new_plan: FeaturePlan | None = None,
) -> dict[str, FeaturePlan]:
    """Apply one Add/Refine/Remove action, returning a new plan map.

    The input map is never modified; the output differs in exactly one key.
    """
    if action.kind == "Add":
        if new_plan is None:
            raise DomainError("Add requires new_plan")
        if new_plan.feature_name in active_plans:
            raise DuplicateFeature(new_plan.feature_name)
        out = dict(active_plans)
        out[new_plan.feature_name] = new_plan
        return out
    if action.target_feature not in active_plans:
        raise UnknownFeature(str(action.target_feature))
    if action.kind == "Remove":
        out = dict(active_plans)
        del out[action.target_feature]
        return out
    # Refine: replace under the same name (renames are not allowed).
    if new_plan is None:
        raise DomainError("Refine requires new_plan")
    if new_plan.feature_name != action.target_feature:
        raise DomainError(
            f"Refine must preserve the name: {new_plan.feature_name!r} != {action.target_feature!r}"
        )
    out = dict(active_plans)
    out[action.target_feature] = new_plan
    return out


_NULL_STRINGS = ("none", "null", "n/a", "na")


def _is_null(raw: object) -> bool:
    return raw is None or (isinstance(raw, str) and raw.strip().lower() in _NULL_STRINGS)


def _coerce_one(raw: object, ftype: str, allowed: list[str] | None) -> tuple[object, str | None]:
    if ftype == "integer":
        if isinstance(raw, bool):
            return None, REASON_TYPE_MISMATCH
        if isinstance(raw, int):
            return raw, None
        if isinstance(raw, float) and raw.is_integer():
            return int(raw), None
        if isinstance(raw, str):
            try:
                return int(raw.strip()), None
            except ValueError:
                return None, REASON_TYPE_MISMATCH
        return None, REASON_TYPE_MISMATCH
    if ftype == "float":
        if isinstance(raw, bool):
            return None, REASON_TYPE_MISMATCH
        if isinstance(raw, (int, float)):
            return float(raw), None
        if isinstance(raw, str):
            try:
                return float(raw.strip()), None
            except ValueError:
                return None, REASON_TYPE_MISMATCH
        return None, REASON_TYPE_MISMATCH
    if ftype == "boolean":
        # JSON booleans and the strings "true"/"false" only; everything else is None.
        if isinstance(raw, bool):
            return raw, None
        if isinstance(raw, str) and raw.strip().lower() in ("true", "false"):
            return raw.strip().lower() == "true", None
        return None, REASON_TYPE_MISMATCH
    if ftype == "categorical":
        if not isinstance(raw, str):
            return None, REASON_TYPE_MISMATCH
        lut = {c.strip().lower(): c for c in (allowed or [])}
        hit = lut.get(raw.strip().lower())
        if hit is None:
            return None, REASON_NOT_IN_CATEGORIES
        return hit, None
    if ftype == "multicategorical":
        if isinstance(raw, str):
            raw = [raw]
        if not isinstance(raw, (list, tuple)):
            return None, REASON_TYPE_MISMATCH
        lut = {c.strip().lower(): c for c in (allowed or [])}
        picked = []
        for item in raw:
            hit = lut.get(str(item).strip().lower())
            if hit is None:
                return None, REASON_NOT_IN_CATEGORIES
            picked.append(hit)
        return picked, None
    return None, REASON_TYPE_MISMATCH


def coerce_value(raw: dict, plan: FeaturePlan) -> CoercedFeature:
    """Coerce one raw built object to the plan's declared types.

    Total: every sub-feature declared in the plan gets an entry; failures
    become None with a machine-readable reason rather than raising.
    """
    values: dict[str, object] = {}
    reasons: dict[str, str] = {}
    raw = raw if isinstance(raw, dict) else {}
    for sub, ftype in plan.feature_type.items():
        if sub not in raw:
            # A bare scalar under "value" tolerates plans whose single
            # sub-feature is named after the feature itself and vice versa.
            if len(plan.feature_type) == 1 and len(raw) == 1:
                candidate = next(iter(raw.values()))
            else:
                values[sub] = None
                reasons[sub] = REASON_MISSING
                continue
        else:
            candidate = raw[sub]
        if _is_null(candidate):
            values[sub] = None
            reasons[sub] = REASON_MISSING
            continue
        val, why = _coerce_one(candidate, ftype, plan.possible_values.get(sub))
        values[sub] = val
        if why is not None:
            reasons[sub] = why
    return CoercedFeature(values=values, reasons=reasons)


def load_trials_csv(path: str) -> list[TrialRecord]:
    """Load a trial dataset: header nct_id,label,start_date[,phase].

    Trials missing a start date are rejected; the downstream knowledge
    cutoff is meaningless without one.
    """
    records: list[TrialRecord] = []
    seen: set[str] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"nct_id", "label", "start_date"}
        if reader.fieldnames is None or not required.issubset(set(reader.fieldnames)):
            raise DatasetError(f"{path}: header must contain nct_id,label,start_date")
        for lineno, row in enumerate(reader, start=2):
            nct = (row.get("nct_id") or "").strip()
            if not nct:
                raise DatasetError(f"{path}:{lineno}: empty nct_id")
            if nct in seen:
                raise DatasetError(f"{path}:{lineno}: duplicate nct_id {nct!r}")
            seen.add(nct)
            label_raw = (row.get("label") or "").strip()
            if label_raw not in ("0", "1"):
                raise DatasetError(f"{path}:{lineno}: label must be 0 or 1, got {label_raw!r}")
            date_raw = (row.get("start_date") or "").strip()
            try:
                start = dt.date.fromisoformat(date_raw)
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: bad start_date {date_raw!r}") from None
            phase = (row.get("phase") or "").strip() or None
            if phase is not None and phase not in PHASES:
                raise DatasetError(f"{path}:{lineno}: unknown phase {phase!r}")
            records.append(TrialRecord(nct_id=nct, label=int(label_raw), start_date=start, phase=phase))
    return records
