"""The agent roles: proposers, planner, grouper, researcher/builder, evaluators.

Each agent is a prompt template + one backend call (single-shot or ReAct) +
schema validation. Every tool handed to an agent is bound to the subject
trial's start date, so no agent can observe a document from on or after it.
"""

from __future__ import annotations

import datetime as dt
import json
import re
import threading
from dataclasses import dataclass, field
from importlib import resources

from . import llm, retrieval
from .domain import (
    FeatureIdea,
    FeaturePlan,
    FeatureValueSet,
    ProposalAction,
    REASON_AGENT_FAILURE,
    TaskSpec,
    TrialRecord,
    coerce_value,
    validate_plan,
)

DEFAULT_MAX_GROUP_SIZE = 4
DEFAULT_TOOL_K = 5
MODEL_EVAL_MAX_SUGGESTIONS = 3

TOOL_SEARCH_PUBMED = "search_pubmed"
TOOL_SEARCH_TRIALS = "search_trials"
TOOL_TRIAL_SUMMARY = "get_trial_summary"


class AgentError(Exception):
    pass


class EmptyProposal(AgentError):
    pass


class InvalidTarget(AgentError):
    pass


class InvalidPlan(AgentError):
    def __init__(self, message: str, violations):
        super().__init__(message)
        self.violations = violations


# ---------------------------------------------------------------------------
# Prompt templates
# ---------------------------------------------------------------------------

_PLACEHOLDER_RE = re.compile(r"\{\{([a-z_]+)\}\}")


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    system: str
    user: str

    def render(self, **variables: str) -> tuple[str, str]:
        """Fill {{name}} placeholders; leftovers are an error."""

        def fill(text: str) -> str:
            out = _PLACEHOLDER_RE.sub(
                lambda m: str(variables[m.group(1)]) if m.group(1) in variables else m.group(0), text
            )
            leftover = _PLACEHOLDER_RE.search(out)
            if leftover:
                raise AgentError(f"template {self.name}: unfilled placeholder {leftover.group(0)}")
            return out

        return fill(self.system), fill(self.user)


def load_template(name: str) -> PromptTemplate:
    """Read prompts/<name>.txt, split into its [system] and [user] sections."""
    text = resources.files("autoct.prompts").joinpath(f"{name}.txt").read_text(encoding="utf-8")
    match = re.match(r"\[system\]\n(.*?)\n\[user\]\n(.*)", text, re.DOTALL)
    if not match:
        raise AgentError(f"prompt file {name}.txt lacks [system]/[user] sections")
    return PromptTemplate(name=name, system=match.group(1).strip(), user=match.group(2).strip())


# ---------------------------------------------------------------------------
# Tools
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ToolCallRecord:
    tool: str
    args: dict
    subject_nct_id: str
    cutoff: dt.date
    returned_dates: tuple[dt.date, ...]
    bypassed_cutoff: bool = False  # true only for the trial's own registration


@dataclass
class ToolKit:
    specs: list[llm.ToolSpec]
    impls: dict
    records: list[ToolCallRecord] = field(default_factory=list)


def _format_docs(index: retrieval.RetrievalIndex, hits: list[tuple[str, float]]) -> str:
    if not hits:
        return "No documents found."
    lines = []
    for doc_id, _score in hits:
        doc = index.documents[doc_id]
        lines.append(f"[{doc_id}] ({doc.date.isoformat()}) {doc.title}: {doc.body}")
    return "\n".join(lines)


def build_toolkit(
    pubmed_index: retrieval.RetrievalIndex,
    nct_index: retrieval.RetrievalIndex,
    trial: TrialRecord,
    k: int = DEFAULT_TOOL_K,
    observer=None,
) -> ToolKit:
    """Tools for one subject trial, cutoff-bound to its start date.

    get_trial_summary returns the trial's own registration record (the one
    date-filter bypass: registration metadata exists before the trial runs).
    """
    kit = ToolKit(specs=[], impls={})
    lock = threading.Lock()

    def record(rec: ToolCallRecord) -> None:
        with lock:
            kit.records.append(rec)
        if observer is not None:
            observer(rec)

    def search_pubmed(query: str = "", k: int = k) -> str:
        hits = retrieval.hybrid_search(pubmed_index, str(query), max(1, int(k)), cutoff=trial.start_date)
        record(
            ToolCallRecord(
                tool=TOOL_SEARCH_PUBMED,
                args={"query": str(query), "k": int(k)},
                subject_nct_id=trial.nct_id,
                cutoff=trial.start_date,
                returned_dates=tuple(pubmed_index.documents[d].date for d, _ in hits),
            )
        )
        return _format_docs(pubmed_index, hits)

    def search_trials(query: str = "", k: int = k) -> str:
        hits = retrieval.nct_exclusion_search(nct_index, str(query), max(1, int(k)), trial.start_date)
        record(
            ToolCallRecord(
                tool=TOOL_SEARCH_TRIALS,
                args={"query": str(query), "k": int(k)},
                subject_nct_id=trial.nct_id,
                cutoff=trial.start_date,
                returned_dates=tuple(nct_index.documents[d].date for d, _ in hits),
            )
        )
        return _format_docs(nct_index, hits)

    def get_trial_summary() -> str:
        doc = nct_index.get_by_nct_id(trial.nct_id)
        record(
            ToolCallRecord(
                tool=TOOL_TRIAL_SUMMARY,
                args={},
                subject_nct_id=trial.nct_id,
                cutoff=trial.start_date,
                returned_dates=(doc.date,) if doc else (),
                bypassed_cutoff=True,
            )
        )
        if doc is None:
            return f"No registration record found for {trial.nct_id}."
        return f"[{doc.doc_id}] ({doc.date.isoformat()}) {doc.title}: {doc.body}"

    kit.specs = [
        llm.ToolSpec(
            TOOL_SEARCH_PUBMED,
            "search published biomedical literature available before the subject trial started",
            {"query": "string", "k": "integer"},
        ),
        llm.ToolSpec(
            TOOL_SEARCH_TRIALS,
            "search registrations of clinical trials that began before the subject trial",
            {"query": "string", "k": "integer"},
        ),
        llm.ToolSpec(
            TOOL_TRIAL_SUMMARY,
            "fetch the subject trial's own registration record",
            {},
        ),
    ]
    kit.impls = {
        TOOL_SEARCH_PUBMED: search_pubmed,
        TOOL_SEARCH_TRIALS: search_trials,
        TOOL_TRIAL_SUMMARY: get_trial_summary,
    }
    return kit


# ---------------------------------------------------------------------------
# Output schemas
# ---------------------------------------------------------------------------

IDEA_LIST_SCHEMA = {
    "type": "array",
    "minItems": 1,
    "items": {
        "type": "object",
        "required": ["feature_name", "description"],
        "properties": {"feature_name": {"type": "string"}, "description": {"type": "string"}},
    },
}

FACTOR_LIST_SCHEMA = {
    "type": "array",
    "minItems": 1,
    "items": {
        "type": "object",
        "required": ["name", "description"],
        "properties": {"name": {"type": "string"}, "description": {"type": "string"}},
    },
}

PLAN_SCHEMA = {
    "type": "object",
    "required": ["feature_name", "feature_type"],
    "properties": {
        "feature_name": {"type": "string"},
        "feature_idea": {"type": "string"},
        "feature_type": {"type": "object"},
        "data_sources": {"type": "array"},
        "example_values": {"type": "array"},
        "possible_values": {"type": "object"},
        "feature_instructions": {"type": "string"},
    },
}

ACTION_SCHEMA = {
    "type": "object",
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["Add", "Refine", "Remove"]},
        "target_feature": {"type": "string"},
        "idea": {"type": "object"},
    },
}

GROUPS_SCHEMA = {"type": "array", "items": {"type": "array", "items": {"type": "string"}}}

BUILT_VALUES_SCHEMA = {
    "type": "object",
    "required": ["feature_values"],
    "properties": {"feature_values": {"type": "object"}, "none_reasons": {"type": "object"}},
}

SUGGESTION_LIST_SCHEMA = {"type": "array", "items": {"type": "string"}}


# ---------------------------------------------------------------------------
# Agent context and operations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Suggestion:
    text: str
    origin: str  # model_based | error_based

    def to_dict(self) -> dict:
        return {"text": self.text, "origin": self.origin}


@dataclass(frozen=True)
class MisclassifiedExample:
    trial: TrialRecord
    predicted: int
    actual: int
    feature_values: dict
    none_reasons: dict


@dataclass(frozen=True)
class EvaluatorInput:
    metric_name: str
    metric_score: float
    feature_plans: dict[str, FeaturePlan]
    feature_importances: dict[str, float]
    misclassified_example: MisclassifiedExample | None = None


@dataclass
class AgentContext:
    """Backend + prompt settings shared by all agent operations."""

    backend: llm.LlmBackend
    model_id: str = "default"
    temperature: float = 0.0
    max_retries: int = llm.DEFAULT_MAX_RETRIES
    max_steps: int = llm.DEFAULT_MAX_STEPS
    _templates: dict[str, PromptTemplate] = field(default_factory=dict)

    def template(self, name: str) -> PromptTemplate:
        if name not in self._templates:
            self._templates[name] = load_template(name)
        return self._templates[name]

    def chat(self, template_name: str, **variables) -> llm.ChatRequest:
        system, user = self.template(template_name).render(**variables)
        return llm.ChatRequest(
            system=system,
            messages=(("user", user),),
            temperature=self.temperature,
            model_id=self.model_id,
        )

    def structured(self, template_name: str, schema: dict, **variables):
        return llm.complete_structured(self.backend, self.chat(template_name, **variables), schema, self.max_retries)

    def react(self, template_name: str, toolkit: ToolKit, **variables) -> llm.ReactTrace:
        system, user = self.template(template_name).render(**variables)
        return llm.react_loop(
            self.backend,
            system,
            user,
            toolkit.specs,
            toolkit.impls,
            max_steps=self.max_steps,
            temperature=self.temperature,
            model_id=self.model_id,
        )


def normalize_feature_name(raw: str) -> str:
    name = re.sub(r"[^a-z0-9_]+", "_", str(raw).strip().lower()).strip("_")
    if not name or not name[0].isalpha():
        name = f"f_{name}" if name else "feature"
    return name


def _unique_names(ideas: list[FeatureIdea]) -> list[FeatureIdea]:
    seen: dict[str, int] = {}
    out = []
    for idea in ideas:
        name = normalize_feature_name(idea.feature_name)
        if name in seen:
            seen[name] += 1
            name = f"{name}_{seen[name]}"
        seen.setdefault(name, 1)
        out.append(FeatureIdea(feature_name=name, description=idea.description))
    return out


def propose_initial(
    ctx: AgentContext,
    task: TaskSpec,
    pos_samples: list[TrialRecord],
    neg_samples: list[TrialRecord],
    toolkit_for,
) -> list[FeatureIdea]:
    """Initial feature ideas: one zero-shot call, one ReAct factor call per
    labeled sample, then a summarizer call that merges and deduplicates.

    ``toolkit_for(trial)`` supplies cutoff-bound tools per sample trial.
    """
    zero_shot = ctx.structured("zero_shot_proposer", IDEA_LIST_SCHEMA, task_description=task.description)
    collected = [
        {"feature_name": str(item["feature_name"]), "description": str(item["description"])}
        for item in zero_shot
    ]
    for trial in list(pos_samples) + list(neg_samples):
        outcome = "success" if trial.label == 1 else "failure"
        trace = ctx.react("factor_proposer", toolkit_for(trial), nct_id=trial.nct_id, outcome=outcome)
        try:
            factors = llm.extract_json(trace.final)
        except ValueError:
            raise llm.UnparseableOutput(
                f"factor proposer for {trial.nct_id} returned no JSON", [trace.final]
            ) from None
        for item in factors if isinstance(factors, list) else []:
            if isinstance(item, dict) and "name" in item:
                collected.append(
                    {"feature_name": str(item["name"]), "description": str(item.get("description", ""))}
                )
    merged = ctx.structured(
        "summarizer",
        IDEA_LIST_SCHEMA,
        task_description=task.description,
        ideas_json=json.dumps(collected, indent=2),
    )
    ideas = _unique_names(
        [FeatureIdea(str(i["feature_name"]), str(i["description"])) for i in merged]
    )
    if not ideas:
        raise EmptyProposal("summarizer produced no feature ideas")
    return ideas


def propose_iterative(
    ctx: AgentContext, suggestion: Suggestion, active_plans: dict[str, FeaturePlan]
) -> ProposalAction:
    """Turn one evaluator suggestion into exactly one Add/Refine/Remove action."""
    names = sorted(active_plans)
    variables = {"feature_names": "\n".join(f"- {n}" for n in names), "suggestion": suggestion.text}
    request = ctx.chat("iterative_proposer", **variables)
    for attempt in range(2):
        raw = llm.complete_structured(ctx.backend, request, ACTION_SCHEMA, ctx.max_retries)
        kind = raw["kind"]
        target = raw.get("target_feature")
        idea_raw = raw.get("idea") or {}
        problem = ""
        if kind in ("Refine", "Remove") and target not in active_plans:
            problem = f"target_feature {target!r} is not an existing feature"
        elif kind in ("Add", "Refine") and not idea_raw.get("feature_name"):
            problem = "Add/Refine requires an idea with a feature_name"
        if not problem:
            idea = None
            if kind in ("Add", "Refine"):
                name = target if kind == "Refine" else normalize_feature_name(idea_raw["feature_name"])
                idea = FeatureIdea(feature_name=name, description=str(idea_raw.get("description", "")))
            return ProposalAction(
                kind=kind,
                target_feature=target if kind != "Add" else None,
                idea=idea,
                origin=suggestion.origin,
            )
        if attempt == 0:
            request = request.add("assistant", json.dumps(raw)).add(
                "user",
                f"That action is invalid: {problem}. The existing features are: "
                f"{', '.join(names)}. Respond again with one valid JSON action.",
            )
    raise InvalidTarget(f"no valid action for suggestion {suggestion.text!r}")


def parse_plan_payload(raw: object, feature_name: str | None = None) -> FeaturePlan:
    """Accept either a bare plan object or a {name: plan} map."""
    if isinstance(raw, dict) and "feature_type" not in raw and raw:
        if feature_name and feature_name in raw:
            raw = raw[feature_name]
        elif all(isinstance(v, dict) for v in raw.values()):
            raw = next(iter(raw.values()))
    if not isinstance(raw, dict):
        raise InvalidPlan("plan payload is not an object", [])
    return FeaturePlan.from_dict(raw)


def plan_feature(ctx: AgentContext, idea: FeatureIdea, task: TaskSpec) -> FeaturePlan:
    """Turn one idea into a validated, executable feature plan."""
    request = ctx.chat(
        "planner",
        task_description=task.description,
        feature_name=idea.feature_name,
        description=idea.description,
    )
    for attempt in range(2):
        raw = llm.complete_structured(ctx.backend, request, PLAN_SCHEMA, ctx.max_retries)
        plan = parse_plan_payload(raw, idea.feature_name)
        if plan.feature_name != idea.feature_name:
            plan = FeaturePlan.from_dict({**plan.to_dict(), "feature_name": idea.feature_name})
        violations = validate_plan(plan)
        if not violations:
            return plan
        if attempt == 0:
            details = "; ".join(f"{v.code}: {v.detail}" for v in violations)
            request = request.add("assistant", json.dumps(raw)).add(
                "user", f"The plan is invalid ({details}). Respond again with a corrected JSON plan."
            )
    raise InvalidPlan(f"plan for {idea.feature_name} failed validation", violations)


def group_features(
    ctx: AgentContext, plans: list[FeaturePlan], max_group_size: int = DEFAULT_MAX_GROUP_SIZE
) -> list[list[str]]:
    """Partition plans into research groups of bounded size.

    The model output is repaired deterministically: duplicates keep their
    first occurrence, unknown names are dropped, omitted names are appended
    as singletons, oversize groups are chunked.
    """
    if not plans:
        raise AgentError("group_features requires at least one plan")
    names = [p.feature_name for p in plans]
    raw = ctx.structured(
        "grouper",
        GROUPS_SCHEMA,
        max_group_size=str(max_group_size),
        features_json=json.dumps(
            [{"feature_name": p.feature_name, "feature_idea": p.feature_idea} for p in plans], indent=2
        ),
    )
    known = set(names)
    seen: set[str] = set()
    groups: list[list[str]] = []
    for group in raw:
        cleaned = []
        for name in group:
            if name in known and name not in seen:
                cleaned.append(name)
                seen.add(name)
        for i in range(0, len(cleaned), max_group_size):
            chunk = cleaned[i : i + max_group_size]
            if chunk:
                groups.append(chunk)
    for name in names:
        if name not in seen:
            groups.append([name])
    return groups


def build_group(
    ctx: AgentContext,
    trial: TrialRecord,
    group: list[FeaturePlan],
    toolkit: ToolKit,
) -> FeatureValueSet:
    """Research one group of features for one trial, then build its values.

    An unparseable builder reply degrades to all-None entries with reason
    AGENT_FAILURE; the pipeline continues.
    """
    plans_json = json.dumps({p.feature_name: p.to_dict() for p in group}, indent=2, sort_keys=True)
    try:
        trace = ctx.react("researcher", toolkit, nct_id=trial.nct_id, plans_json=plans_json)
        raw = ctx.structured(
            "builder",
            BUILT_VALUES_SCHEMA,
            nct_id=trial.nct_id,
            plans_json=plans_json,
            research_notes=trace.final,
        )
    except llm.UnparseableOutput:
        values = {p.feature_name: {sub: None for sub in p.feature_type} for p in group}
        reasons = {p.feature_name: REASON_AGENT_FAILURE for p in group}
        return FeatureValueSet(nct_id=trial.nct_id, values=values, none_reasons=reasons)
    built = raw.get("feature_values") or {}
    stated_reasons = raw.get("none_reasons") or {}
    values: dict[str, dict[str, object]] = {}
    none_reasons: dict[str, str] = {}
    for plan in group:
        payload = built.get(plan.feature_name)
        coerced = coerce_value(payload if isinstance(payload, dict) else {}, plan)
        values[plan.feature_name] = coerced.values
        if coerced.reasons:
            stated = stated_reasons.get(plan.feature_name)
            detail = "; ".join(f"{sub}: {why}" for sub, why in sorted(coerced.reasons.items()))
            none_reasons[plan.feature_name] = f"{stated} ({detail})" if stated else detail
    return FeatureValueSet(nct_id=trial.nct_id, values=values, none_reasons=none_reasons)


def evaluate(
    ctx: AgentContext,
    evaluator_input: EvaluatorInput,
    toolkit_for,
    max_total: int = 6,
) -> list[Suggestion]:
    """Model-based suggestions (<=3) plus error-based analysis of one
    misclassified example; at most ``max_total`` suggestions overall."""
    plans_json = json.dumps(
        {n: p.to_dict() for n, p in sorted(evaluator_input.feature_plans.items())}, indent=2
    )
    importances_json = json.dumps(dict(sorted(evaluator_input.feature_importances.items())), indent=2)
    suggestions: list[Suggestion] = []
    if evaluator_input.misclassified_example is None:
        raw = ctx.structured(
            "model_evaluator",
            SUGGESTION_LIST_SCHEMA,
            metric_name=evaluator_input.metric_name,
            metric_score=f"{evaluator_input.metric_score:.4f}",
            plans_json=plans_json,
            importances_json=importances_json,
        )
        for text in raw[:MODEL_EVAL_MAX_SUGGESTIONS]:
            if str(text).strip():
                suggestions.append(Suggestion(text=str(text), origin="model_based"))
    else:
        example = evaluator_input.misclassified_example
        trace = ctx.react(
            "error_evaluator",
            toolkit_for(example.trial),
            metric_name=evaluator_input.metric_name,
            metric_score=f"{evaluator_input.metric_score:.4f}",
            plans_json=plans_json,
            importances_json=importances_json,
            nct_id=example.trial.nct_id,
            predicted=str(example.predicted),
            actual=str(example.actual),
            features_json=json.dumps(example.feature_values, indent=2, sort_keys=True),
            none_reasons_json=json.dumps(example.none_reasons, indent=2, sort_keys=True),
        )
        if trace.final.strip():
            suggestions.append(Suggestion(text=trace.final.strip(), origin="error_based"))
    return suggestions[:max_total]
