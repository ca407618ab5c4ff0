"""End-to-end test scenario: a synthetic dataset with one planted separator.

Labels equal the digit-sum parity of the trial id. Noise features derive from
an md5 of the id (independent of the label), while the planted feature
``approval_signal`` equals the label exactly and is reachable through one Add
suggestion from the model-based evaluator. A RuleBackend plays the LLM; every
response is a pure function of the request, so recording once and replaying
from the cache is deterministic.
"""

import datetime as dt
import hashlib
import json
import random
import re
from dataclasses import dataclass
from pathlib import Path

from autoct.domain import SearchConfig
from autoct.pipeline import RunConfig
from autoct.retrieval import ingest_corpus_file

from helpers import RuleBackend, observation_count

NOISE_FEATURES = ("sponsor_class", "enrollment_count", "uses_placebo")
PLANTED = "approval_signal"
SPONSOR_CLASSES = ["industry", "academic", "government"]


def digit_sum(nct_id: str) -> int:
    return sum(int(c) for c in nct_id if c.isdigit())


def label_of(nct_id: str) -> int:
    return digit_sum(nct_id) % 2


def noise_bytes(nct_id: str) -> bytes:
    return hashlib.md5(nct_id.encode("utf-8")).digest()


def start_date_of(i: int) -> dt.date:
    return dt.date(2010, 1, 1) + dt.timedelta(days=(i * 13) % 900)


def _write_pool(path: Path, prefix: str, count: int) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("nct_id,label,start_date,phase\n")
        for i in range(count):
            nct = f"NCT{prefix}{i:04d}"
            fh.write(f"{nct},{label_of(nct)},{start_date_of(i).isoformat()},I\n")


def pool_trials(prefix: str, count: int):
    return [(f"NCT{prefix}{i:04d}", start_date_of(i)) for i in range(count)]


def _write_corpora(root: Path) -> tuple[Path, Path]:
    rng = random.Random(42)
    vocabulary = (
        "aspirin statin vaccine cohort dose toxicity response placebo oncology "
        "cardiac immunogenicity enrollment masking arm endpoint biomarker"
    ).split()
    pubmed = root / "pubmed.jsonl"
    with open(pubmed, "w", encoding="utf-8") as fh:
        for i in range(40):
            date = dt.date(1995, 1, 1) + dt.timedelta(days=rng.randrange(0, 5000))
            fh.write(
                json.dumps(
                    {
                        "doc_id": f"pm{i:03d}",
                        "source": "pubmed",
                        "title": f"study {i}",
                        "body": " ".join(rng.choices(vocabulary, k=10)),
                        "date": date.isoformat(),
                    }
                )
                + "\n"
            )
        for i in range(5):  # post-hoc articles that must never surface
            fh.write(
                json.dumps(
                    {
                        "doc_id": f"late{i}",
                        "source": "pubmed",
                        "title": "post hoc outcome analysis",
                        "body": "outcome results of the trial itself",
                        "date": "2020-01-01",
                    }
                )
                + "\n"
            )
    nct = root / "nct.jsonl"
    with open(nct, "w", encoding="utf-8") as fh:
        for prefix, count in (("10", 360), ("20", 260), ("30", 260)):
            for nct_id, start in pool_trials(prefix, count):
                fh.write(
                    json.dumps(
                        {
                            "doc_id": f"reg-{nct_id}",
                            "source": "nct",
                            "title": f"registration {nct_id}",
                            "body": "phase one interventional study with "
                            + " ".join(rng.choices(vocabulary, k=6)),
                            "date": start.isoformat(),
                            "nct_id": nct_id,
                        }
                    )
                    + "\n"
                )
    return pubmed, nct


# --- the scripted feature values ------------------------------------------------

def built_values_for(nct_id: str, feature_names) -> dict:
    h = noise_bytes(nct_id)
    values, reasons = {}, {}
    for name in feature_names:
        if name == "sponsor_class":
            values[name] = {"value": SPONSOR_CLASSES[h[1] % 3]}
        elif name == "enrollment_count":
            values[name] = {"value": 20 + h[0]}
        elif name == "uses_placebo":
            if h[3] % 20 == 0:
                values[name] = {"value": None}
                reasons[name] = "insufficient information in the registration record"
            else:
                values[name] = {"value": h[2] % 2 == 0}
        elif name == PLANTED:
            values[name] = {"value": label_of(nct_id)}
    return {"feature_values": values, "none_reasons": reasons}


def _plan_for(name: str, expanded: bool) -> dict:
    if name == "sponsor_class":
        classes = SPONSOR_CLASSES + (["non-profit"] if expanded else [])
        return {
            "feature_name": name,
            "feature_idea": "class of the trial sponsor",
            "feature_type": {"value": "categorical"},
            "data_sources": ["current_trial_summary"],
            "example_values": [{"value": classes[0]}],
            "possible_values": {"value": classes},
            "feature_instructions": "Classify the sponsor from the registration record.",
        }
    if name == "enrollment_count":
        return {
            "feature_name": name,
            "feature_idea": "planned enrollment",
            "feature_type": {"value": "integer"},
            "data_sources": ["current_trial_summary"],
            "example_values": [{"value": 50}],
            "possible_values": {},
            "feature_instructions": "Extract the planned enrollment as an integer.",
        }
    if name == "uses_placebo":
        return {
            "feature_name": name,
            "feature_idea": "whether a placebo arm is used",
            "feature_type": {"value": "boolean"},
            "data_sources": ["current_trial_summary", "related_clinical_trials"],
            "example_values": [{"value": True}],
            "possible_values": {},
            "feature_instructions": "Set true when any arm is a placebo arm.",
        }
    return {
        "feature_name": PLANTED,
        "feature_idea": "prior-approval evidence in the same program",
        "feature_type": {"value": "integer"},
        "data_sources": ["related_clinical_trials", "pubmed"],
        "example_values": [{"value": 1}],
        "possible_values": {},
        "feature_instructions": "Score prior-approval evidence for the program as 0 or 1.",
    }


NOISE_IDEAS = [
    {"feature_name": "sponsor_class", "description": "class of the trial sponsor"},
    {"feature_name": "enrollment_count", "description": "planned enrollment"},
    {"feature_name": "uses_placebo", "description": "whether a placebo arm is used"},
]

ZERO_SHOT_IDEAS = NOISE_IDEAS + [
    {"feature_name": f"extra_idea_{i}", "description": f"broad idea number {i}"} for i in range(7)
]

FACTORS = [
    {"name": f"factor {i}", "description": f"generalizable factor number {i}"} for i in range(5)
]

ADD_SUGGESTION = (
    f"Consider adding a feature '{PLANTED}' that captures prior-approval evidence "
    "for the same program, as it could be highly predictive."
)
REMOVE_SUGGESTION = "Remove 'uses_placebo', it does not contribute to the model."
REFINE_SUGGESTION = "Refine 'sponsor_class' to expand the sponsor classes covered."


def scenario_rules() -> list:
    known = list(NOISE_FEATURES) + [PLANTED]

    def factor_responder(request, transcript):
        if observation_count(transcript) == 0:
            return '{"action": "get_trial_summary", "args": {}}'
        return json.dumps({"final": json.dumps(FACTORS)})

    def planner_responder(request, transcript):
        match = re.search(r'feature_name must be "(\w+)"', transcript)
        name = match.group(1) if match else PLANTED
        return json.dumps(_plan_for(name, expanded="expand the sponsor classes" in transcript))

    def grouper_responder(request, transcript):
        names = [n for n in known if f'"feature_name": "{n}"' in transcript]
        groups = [names[i : i + 3] for i in range(0, len(names), 3)]
        return json.dumps(groups)

    def researcher_responder(request, transcript):
        turns = observation_count(transcript)
        if turns == 0:
            return '{"action": "get_trial_summary", "args": {}}'
        if turns == 1 and digit_sum(_nct_of(transcript)) % 7 == 0:
            return '{"action": "search_trials", "args": {"query": "phase one interventional study", "k": 3}}'
        return json.dumps({"final": f"registration details collected for {_nct_of(transcript)}"})

    def builder_responder(request, transcript):
        nct = _nct_of(transcript)
        features = [n for n in known if f'"{n}"' in transcript]
        return json.dumps(built_values_for(nct, features))

    def model_eval_responder(request, transcript):
        if f'"{PLANTED}"' in transcript:
            return json.dumps([REFINE_SUGGESTION, REMOVE_SUGGESTION])
        return json.dumps([ADD_SUGGESTION, REMOVE_SUGGESTION, REFINE_SUGGESTION])

    def error_eval_responder(request, transcript):
        if observation_count(transcript) == 0:
            return '{"action": "search_pubmed", "args": {"query": "endpoint masking enrollment", "k": 3}}'
        return json.dumps(
            {"final": "The registration record alone was ambiguous here; " + REFINE_SUGGESTION}
        )

    def iterative_responder(request, transcript):
        if PLANTED in transcript and "adding" in transcript:
            return json.dumps(
                {"kind": "Add", "idea": {"feature_name": PLANTED, "description": "prior-approval evidence"}}
            )
        if "Remove 'uses_placebo'" in transcript:
            return json.dumps({"kind": "Remove", "target_feature": "uses_placebo"})
        return json.dumps(
            {
                "kind": "Refine",
                "target_feature": "sponsor_class",
                "idea": {"feature_name": "sponsor_class", "description": "expand the sponsor classes"},
            }
        )

    return [
        ("Propose a comprehensive list of feature ideas", lambda r, t: json.dumps(ZERO_SHOT_IDEAS)),
        ("deduce key factors", factor_responder),
        ("Merge them into a single list", lambda r, t: json.dumps(NOISE_IDEAS)),
        ("Turn the suggestion into exactly one action", iterative_responder),
        ("defining a feature schema", planner_responder),
        ("Cluster the following features", grouper_responder),
        ("do deep research", researcher_responder),
        ("CORRECTLY construct", builder_responder),
        ("limit to a maximum of 2-3", model_eval_responder),
        ("an example of an incorrect prediction", error_eval_responder),
    ]


def _nct_of(transcript: str) -> str:
    match = re.search(r"NCT\d+", transcript)
    return match.group(0) if match else "NCT0000000"


# --- environment assembly --------------------------------------------------------

@dataclass
class ScenarioEnv:
    root: Path
    train_csv: Path
    test_csv: Path
    pubmed_index: Path
    nct_index: Path
    cache_dir: Path

    def make_config(self, output_dir: Path, rollouts: int = 3, seed: int = 20240810) -> RunConfig:
        return RunConfig(
            task_description="Predict the outcome of a phase 1 clinical trial (1 = success, 0 = failure).",
            train_csv=str(self.train_csv),
            valid_csv=str(self.train_csv),
            test_csv=str(self.test_csv),
            pubmed_index=str(self.pubmed_index),
            nct_index=str(self.nct_index),
            output_dir=str(output_dir),
            metric="roc_auc",
            search=SearchConfig(rollouts=rollouts, max_depth=10, seed=seed),
            train_size=100,
            valid_size=100,
            test_size=100,
            llm_backend="replay",
            model_id="scenario-model",
            cache_dir=str(self.cache_dir),
        )

    def backend(self) -> RuleBackend:
        return RuleBackend(scenario_rules())


def build_scenario(root: Path) -> ScenarioEnv:
    root.mkdir(parents=True, exist_ok=True)
    train_csv = root / "train_pool.csv"
    test_csv = root / "test_pool.csv"
    _write_pool(train_csv, "10", 360)
    _write_pool(test_csv, "30", 260)
    pubmed_jsonl, nct_jsonl = _write_corpora(root)
    pubmed_index = root / "pubmed_index"
    nct_index = root / "nct_index"
    ingest_corpus_file(str(pubmed_jsonl), str(pubmed_index))
    ingest_corpus_file(str(nct_jsonl), str(nct_index))
    return ScenarioEnv(
        root=root,
        train_csv=train_csv,
        test_csv=test_csv,
        pubmed_index=pubmed_index,
        nct_index=nct_index,
        cache_dir=root / "shared-llm-cache",
    )
