"""Orchestration: configuration, dataset sampling, the run directory, the
search wiring, test evaluation and report generation.

Run directory layout (append-only; content-addressed stores make resumption a
pure replay):

    config.ini            effective configuration snapshot
    samples/{train,valid,test}.csv
    llm-cache/            request-digest keyed responses (unless cache_dir set)
    plans/<hash>.json     plan sets, content-addressed
    values/<hash>.json    built values per feature-plan hash
    features/<hash>.csv   encoded train+valid matrix per plan-set hash
    tree.json             search checkpoint, rewritten after every rollout
    scores_{valid,test}.csv, report.json, report.txt, tool_log.jsonl
    meta.json             wall clock and other non-deterministic bookkeeping
"""

from __future__ import annotations

import configparser
import hashlib
import json
import os
import random
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import agents, llm, modeling, retrieval, search
from .domain import (
    FeaturePlan,
    FeatureValueSet,
    ProposalAction,
    SearchConfig,
    TaskSpec,
    TrialRecord,
    apply_proposal,
    load_trials_csv,
)

RUN_FORMAT_VERSION = 1
BUILD_WORKERS = 4
SHAP_TOP_CONTRIBUTIONS = 20


class ConfigError(Exception):
    """Bad configuration; the CLI maps this to exit code 2."""


class InsufficientClass(Exception):
    """A class has fewer members than its stratified quota."""


class CorruptRun(Exception):
    """Run directory artifacts disagree (hash mismatch or newer format)."""


class LockError(Exception):
    pass


def derive_seed(seed: int, tag: str) -> int:
    digest = hashlib.sha256(f"{seed}:{tag}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    task_description: str
    train_csv: str
    valid_csv: str
    test_csv: str
    pubmed_index: str
    nct_index: str
    output_dir: str
    metric: str = "roc_auc"
    search: SearchConfig = field(default_factory=SearchConfig)
    stop_at_score: float | None = None
    train_size: int = 100
    valid_size: int = 100
    test_size: int = 100
    llm_backend: str = "http"  # http | replay
    model_id: str = "gpt-4o-mini"
    temperature: float = 0.0
    cache_dir: str | None = None  # default <run>/llm-cache

    def validate_paths(self) -> None:
        for label, path in (
            ("train_csv", self.train_csv),
            ("valid_csv", self.valid_csv),
            ("test_csv", self.test_csv),
            ("pubmed_index", self.pubmed_index),
            ("nct_index", self.nct_index),
        ):
            if not Path(path).exists():
                raise ConfigError(f"{label} path does not exist: {path}")
        if self.llm_backend not in ("http", "replay"):
            raise ConfigError(f"unknown llm backend {self.llm_backend!r}")
        if self.metric not in modeling.METRIC_FUNCTIONS:
            raise ConfigError(f"unknown metric {self.metric!r}")

    def write_ini(self, path: str) -> None:
        cp = configparser.ConfigParser()
        cp["data"] = {
            "task_description": self.task_description,
            "train_csv": self.train_csv,
            "valid_csv": self.valid_csv,
            "test_csv": self.test_csv,
            "pubmed_index": self.pubmed_index,
            "nct_index": self.nct_index,
            "output_dir": self.output_dir,
            "metric": self.metric,
        }
        cp["search"] = {
            "rollouts": str(self.search.rollouts),
            "max_depth": str(self.search.max_depth),
            "exploration_weight": repr(self.search.exploration_weight),
            "n_factor_pos": str(self.search.n_factor_pos),
            "n_factor_neg": str(self.search.n_factor_neg),
            "n_error_examples": str(self.search.n_error_examples),
            "seed": str(self.search.seed),
        }
        if self.stop_at_score is not None:
            cp["search"]["stop_at_score"] = repr(self.stop_at_score)
        cp["sampling"] = {
            "train_size": str(self.train_size),
            "valid_size": str(self.valid_size),
            "test_size": str(self.test_size),
        }
        cp["llm"] = {
            "backend": self.llm_backend,
            "model_id": self.model_id,
            "temperature": repr(self.temperature),
        }
        if self.cache_dir:
            cp["llm"]["cache_dir"] = self.cache_dir
        with open(path, "w", encoding="utf-8") as fh:
            cp.write(fh)


def parse_config(path: str) -> RunConfig:
    if not Path(path).exists():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser()
    try:
        cp.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    try:
        data = cp["data"]
        sampling = cp["sampling"] if cp.has_section("sampling") else {}
        llm_section = cp["llm"] if cp.has_section("llm") else {}
        search_section = cp["search"] if cp.has_section("search") else {}
        config = RunConfig(
            task_description=data["task_description"],
            train_csv=data["train_csv"],
            valid_csv=data["valid_csv"],
            test_csv=data["test_csv"],
            pubmed_index=data["pubmed_index"],
            nct_index=data["nct_index"],
            output_dir=data["output_dir"],
            metric=data.get("metric", "roc_auc"),
            search=SearchConfig(
                rollouts=int(search_section.get("rollouts", 10)),
                max_depth=int(search_section.get("max_depth", 10)),
                exploration_weight=float(search_section.get("exploration_weight", 1.0)),
                n_factor_pos=int(search_section.get("n_factor_pos", 3)),
                n_factor_neg=int(search_section.get("n_factor_neg", 3)),
                n_error_examples=int(search_section.get("n_error_examples", 3)),
                seed=int(search_section.get("seed", 0)),
            ),
            stop_at_score=(
                float(search_section["stop_at_score"]) if "stop_at_score" in search_section else None
            ),
            train_size=int(sampling.get("train_size", 100)),
            valid_size=int(sampling.get("valid_size", 100)),
            test_size=int(sampling.get("test_size", 100)),
            llm_backend=llm_section.get("backend", "http"),
            model_id=llm_section.get("model_id", "gpt-4o-mini"),
            temperature=float(llm_section.get("temperature", 0.0)),
            cache_dir=llm_section.get("cache_dir") or None,
        )
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"invalid config {path}: {exc}") from exc
    return config


# ---------------------------------------------------------------------------
# Stratified sampling
# ---------------------------------------------------------------------------

def stratified_sample(records: list[TrialRecord], n: int, seed: int) -> list[TrialRecord]:
    """Seeded stratified subsample preserving label proportions.

    Per-class quotas are floor(n * p_c); the remaining slots go to classes by
    largest fractional remainder, ties broken by ascending class value.
    """
    if n > len(records):
        raise ConfigError(f"cannot sample {n} from {len(records)} records")
    counts = Counter(r.label for r in records)
    total = len(records)
    quotas: dict[int, int] = {}
    fractions: dict[int, float] = {}
    for cls in sorted(counts):
        exact = n * counts[cls] / total
        quotas[cls] = int(exact)
        fractions[cls] = exact - quotas[cls]
    leftover = n - sum(quotas.values())
    for cls in sorted(fractions, key=lambda c: (-fractions[c], c))[:leftover]:
        quotas[cls] += 1
    rng = random.Random(seed)
    chosen: list[TrialRecord] = []
    for cls in sorted(quotas):
        members = [r for r in records if r.label == cls]
        if quotas[cls] > len(members):
            raise InsufficientClass(f"class {cls} has {len(members)} members < quota {quotas[cls]}")
        chosen.extend(rng.sample(members, quotas[cls]))
    return sorted(chosen, key=lambda r: r.nct_id)


def write_trials_csv(records: list[TrialRecord], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("nct_id,label,start_date,phase\n")
        for r in records:
            fh.write(f"{r.nct_id},{r.label},{r.start_date.isoformat()},{r.phase or ''}\n")


# ---------------------------------------------------------------------------
# Stores
# ---------------------------------------------------------------------------

def plan_hash(plan: FeaturePlan) -> str:
    canonical = json.dumps(plan.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _dump_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload, sort_keys=True, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    os.replace(tmp, path)


class PlanStore:
    """Content-addressed plan sets under plans/<hash>.json."""

    def __init__(self, root: Path):
        self.root = root

    def save(self, plans: dict[str, FeaturePlan]) -> str:
        digest = search.plan_set_hash(plans)
        path = self.root / f"{digest}.json"
        if not path.exists():
            _dump_json(path, {name: plan.to_dict() for name, plan in sorted(plans.items())})
        return digest

    def load(self, digest: str) -> dict[str, FeaturePlan]:
        path = self.root / f"{digest}.json"
        if not path.exists():
            raise CorruptRun(f"plan set {digest} missing from {self.root}")
        raw = json.loads(path.read_text(encoding="utf-8"))
        plans = {name: FeaturePlan.from_dict(d) for name, d in raw.items()}
        if search.plan_set_hash(plans) != digest:
            raise CorruptRun(f"plan set {digest} content hash mismatch")
        return plans


class ValueStore:
    """Built feature values per plan content hash under values/<hash>.json.

    A Refine produces a new plan hash, so stale values for the old plan are
    never read again; Add/Remove leave other features untouched.
    """

    def __init__(self, root: Path):
        self.root = root
        self._cache: dict[str, dict] = {}

    def _load(self, digest: str) -> dict:
        if digest not in self._cache:
            path = self.root / f"{digest}.json"
            if path.exists():
                self._cache[digest] = json.loads(path.read_text(encoding="utf-8"))["trials"]
            else:
                self._cache[digest] = {}
        return self._cache[digest]

    def missing_trials(self, plan: FeaturePlan, trials: list[TrialRecord]) -> list[TrialRecord]:
        built = self._load(plan_hash(plan))
        return [t for t in trials if t.nct_id not in built]

    def record(self, plan: FeaturePlan, value_sets: list[FeatureValueSet]) -> None:
        digest = plan_hash(plan)
        built = self._load(digest)
        for vs in sorted(value_sets, key=lambda v: v.nct_id):
            if vs.nct_id in built:
                continue
            built[vs.nct_id] = {
                "values": vs.values.get(plan.feature_name, {}),
                "none_reason": vs.none_reasons.get(plan.feature_name),
            }
        _dump_json(self.root / f"{digest}.json", {"feature_name": plan.feature_name, "trials": built})

    def assemble(self, plans: dict[str, FeaturePlan], trials: list[TrialRecord]) -> list[FeatureValueSet]:
        out = []
        for trial in sorted(trials, key=lambda t: t.nct_id):
            values: dict[str, dict] = {}
            reasons: dict[str, str] = {}
            for name, plan in plans.items():
                entry = self._load(plan_hash(plan)).get(trial.nct_id)
                if entry is None:
                    raise CorruptRun(f"no built values for {name} / {trial.nct_id}")
                values[name] = entry["values"]
                if entry.get("none_reason"):
                    reasons[name] = entry["none_reason"]
            out.append(FeatureValueSet(nct_id=trial.nct_id, values=values, none_reasons=reasons))
        return out


class FileLock:
    """Single-owner lock on the run directory; stale locks from dead
    processes are reclaimed."""

    def __init__(self, path: Path):
        self.path = path

    def __enter__(self):
        if self.path.exists():
            try:
                pid = int(self.path.read_text(encoding="utf-8").strip() or "0")
            except ValueError:
                pid = 0
            if pid and pid != os.getpid() and _pid_alive(pid):
                raise LockError(f"run directory is locked by live process {pid}")
            self.path.unlink()
        self.path.write_text(str(os.getpid()), encoding="utf-8")
        return self

    def __exit__(self, *exc):
        if self.path.exists():
            self.path.unlink()
        return False


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except OSError:
        return False
    return True


# ---------------------------------------------------------------------------
# Run report
# ---------------------------------------------------------------------------

@dataclass
class RunReport:
    nodes: list[dict]
    best: dict
    final_plans: dict
    feature_importances: dict
    permutation_importances: dict
    shap: list[dict]
    llm_calls: dict
    wall_clock_seconds: float = 0.0

    def to_dict(self) -> dict:
        # llm_calls and wall clock stay out: both depend on how the process
        # reached the result (fresh vs resumed), not on the result itself.
        return {
            "format_version": RUN_FORMAT_VERSION,
            "nodes": self.nodes,
            "best": self.best,
            "final_plans": self.final_plans,
            "feature_importances": self.feature_importances,
            "permutation_importances": self.permutation_importances,
            "shap": self.shap,
        }


# ---------------------------------------------------------------------------
# Runner
# ---------------------------------------------------------------------------

class Runner:
    """Owns one run directory and wires agents + search + models together."""

    def __init__(
        self,
        config: RunConfig,
        backend: llm.LlmBackend | None = None,
        tool_observer=None,
        on_rollout=None,
        log=None,
    ):
        self.config = config
        self.run_dir = Path(config.output_dir)
        self._injected_backend = backend
        self._tool_observer = tool_observer
        self._on_rollout = on_rollout
        self._log = log or (lambda msg: None)
        self._phase = "init"
        self._tool_records: list[dict] = []
        self.backend: llm.CachedBackend | None = None
        self.ctx: agents.AgentContext | None = None
        self.task = TaskSpec(description=config.task_description, metric=config.metric)
        self._bundles: dict[str, tuple[float, modeling.TrainedModelBundle]] = {}
        self._matrices: dict[str, tuple[modeling.DesignMatrix, modeling.DesignMatrix]] = {}

    # -- plumbing ----------------------------------------------------------

    def _paths(self) -> dict[str, Path]:
        r = self.run_dir
        return {
            "config": r / "config.ini",
            "samples": r / "samples",
            "plans": r / "plans",
            "values": r / "values",
            "features": r / "features",
            "tree": r / "tree.json",
            "report_json": r / "report.json",
            "report_txt": r / "report.txt",
            "meta": r / "meta.json",
            "tool_log": r / "tool_log.jsonl",
            "lock": r / "lock",
        }

    def _make_backend(self) -> llm.CachedBackend:
        cache_dir = self.config.cache_dir or str(self.run_dir / "llm-cache")
        if self._injected_backend is not None:
            return llm.CachedBackend(cache_dir, self._injected_backend)
        if self.config.llm_backend == "replay":
            return llm.CachedBackend(cache_dir, None)
        return llm.CachedBackend(cache_dir, llm.HttpBackend())

    def _toolkit_for(self, trial: TrialRecord) -> agents.ToolKit:
        def observe(rec: agents.ToolCallRecord) -> None:
            entry = {
                "phase": self._phase,
                "tool": rec.tool,
                "args": rec.args,
                "subject_nct_id": rec.subject_nct_id,
                "cutoff": rec.cutoff.isoformat(),
                "returned_dates": [d.isoformat() for d in rec.returned_dates],
                "bypassed_cutoff": rec.bypassed_cutoff,
                "violations": sum(
                    1 for d in rec.returned_dates if d >= rec.cutoff and not rec.bypassed_cutoff
                ),
            }
            self._tool_records.append(entry)
            if self._tool_observer is not None:
                self._tool_observer(rec, self._phase)

        return agents.build_toolkit(self.pubmed_index, self.nct_index, trial, observer=observe)

    # -- feature building ---------------------------------------------------

    def _build_missing(self, plans: dict[str, FeaturePlan], trials: list[TrialRecord]) -> None:
        missing: dict[str, list[TrialRecord]] = {}
        for name, plan in plans.items():
            need = self.values.missing_trials(plan, trials)
            if need:
                missing[name] = need
        if not missing:
            return
        to_build = [plans[name] for name in sorted(missing)]
        if len(to_build) > 1:
            groups = agents.group_features(self.ctx, to_build)
        else:
            groups = [[to_build[0].feature_name]]
        for group_names in groups:
            group_plans = [plans[name] for name in group_names]
            group_trials = sorted(
                {t.nct_id: t for name in group_names for t in missing.get(name, [])}.values(),
                key=lambda t: t.nct_id,
            )
            if not group_trials:
                continue
            with ThreadPoolExecutor(max_workers=BUILD_WORKERS) as pool:
                value_sets = list(
                    pool.map(
                        lambda trial: agents.build_group(
                            self.ctx, trial, group_plans, self._toolkit_for(trial)
                        ),
                        group_trials,
                    )
                )
            value_sets.sort(key=lambda vs: vs.nct_id)
            for plan in group_plans:
                self.values.record(plan, value_sets)

    def _encode(self, plans: dict[str, FeaturePlan], trials: list[TrialRecord]) -> modeling.DesignMatrix:
        return modeling.encode(plans, self.values.assemble(plans, trials))

    def _simulate(self, plans: dict[str, FeaturePlan]) -> tuple[float, modeling.TrainedModelBundle]:
        digest = self.plans_store.save(plans)
        if digest in self._bundles:
            return self._bundles[digest]
        self._build_missing(plans, self.train_records + self.valid_records)
        X_train = self._encode(plans, self.train_records)
        X_valid = self._encode(plans, self.valid_records)
        y_train = np.array([t.label for t in sorted(self.train_records, key=lambda t: t.nct_id)])
        y_valid = np.array([t.label for t in sorted(self.valid_records, key=lambda t: t.nct_id)])
        bundle = modeling.train(X_train, y_train, seed=derive_seed(self.config.search.seed, "model"))
        if bundle.degenerate:
            score = 0.5
            bundle.selected = modeling.MODEL_ORDER[0]
            bundle.validation_scores = {name: score for name in modeling.MODEL_ORDER}
        else:
            bundle.evaluate_and_select(X_valid.X, y_valid, self.config.metric)
            score = bundle.validation_scores[bundle.selected]
        combined = modeling.encode(plans, self.values.assemble(plans, self.train_records + self.valid_records))
        modeling.write_matrix_csv(combined, str(self._paths()["features"] / f"{digest}.csv"))
        self._bundles[digest] = (score, bundle)
        self._matrices[digest] = (X_train, X_valid)
        return score, bundle

    # -- agent wiring --------------------------------------------------------

    def _initialize(self):
        rng = random.Random(derive_seed(self.config.search.seed, "factors"))
        pos = [t for t in self.train_records if t.label == 1]
        neg = [t for t in self.train_records if t.label == 0]
        pos_samples = rng.sample(pos, min(self.config.search.n_factor_pos, len(pos)))
        neg_samples = rng.sample(neg, min(self.config.search.n_factor_neg, len(neg)))
        ideas = agents.propose_initial(self.ctx, self.task, pos_samples, neg_samples, self._toolkit_for)
        plans: dict[str, FeaturePlan] = {}
        for idea in ideas:
            try:
                plans[idea.feature_name] = agents.plan_feature(self.ctx, idea, self.task)
            except (agents.InvalidPlan, llm.UnparseableOutput) as exc:
                self._log(f"dropping idea {idea.feature_name}: {exc}")
        if not plans:
            raise agents.EmptyProposal("no feature idea produced a valid plan")
        score, bundle = self._simulate(plans)
        return plans, score, bundle

    def _propose(self, suggestion: agents.Suggestion, plans: dict[str, FeaturePlan]) -> ProposalAction:
        return agents.propose_iterative(self.ctx, suggestion, plans)

    def _make_plan(self, action: ProposalAction) -> FeaturePlan | None:
        if action.kind == "Remove":
            return None
        return agents.plan_feature(self.ctx, action.idea, self.task)

    def _evaluate_node(self, node_id, plans, bundle, score) -> list[agents.Suggestion]:
        digest = search.plan_set_hash(plans)
        _, X_valid = self._matrices[digest]
        imp = modeling.importances(bundle, X_valid)
        suggestions = list(
            agents.evaluate(
                self.ctx,
                agents.EvaluatorInput(
                    metric_name=self.config.metric,
                    metric_score=score,
                    feature_plans=plans,
                    feature_importances=imp,
                ),
                self._toolkit_for,
            )
        )
        if not bundle.degenerate:
            y_valid = np.array([t.label for t in sorted(self.valid_records, key=lambda t: t.nct_id)])
            probs = bundle.predict_proba(X_valid.X)
            predicted = (probs >= 0.5).astype(int)
            wrong_idx = [i for i in range(len(y_valid)) if predicted[i] != y_valid[i]]
            rng = random.Random(derive_seed(self.config.search.seed, f"errors:{node_id}"))
            picked = rng.sample(wrong_idx, min(self.config.search.n_error_examples, len(wrong_idx)))
            by_id = {t.nct_id: t for t in self.valid_records}
            ordered_ids = sorted(by_id)
            value_sets = {vs.nct_id: vs for vs in self.values.assemble(plans, self.valid_records)}
            for i in picked:
                nct = ordered_ids[i]
                trial = by_id[nct]
                vs = value_sets[nct]
                suggestions.extend(
                    agents.evaluate(
                        self.ctx,
                        agents.EvaluatorInput(
                            metric_name=self.config.metric,
                            metric_score=score,
                            feature_plans=plans,
                            feature_importances=imp,
                            misclassified_example=agents.MisclassifiedExample(
                                trial=trial,
                                predicted=int(predicted[i]),
                                actual=int(y_valid[i]),
                                feature_values=vs.values,
                                none_reasons=vs.none_reasons,
                            ),
                        ),
                        self._toolkit_for,
                    )
                )
        return suggestions[: search.MAX_CHILDREN]

    # -- main entry ----------------------------------------------------------

    def run(self, resume: bool = False) -> RunReport:
        started = time.monotonic()
        self.config.validate_paths()
        paths = self._paths()
        if not resume and paths["tree"].exists():
            raise ConfigError(
                f"output dir {self.run_dir} already holds a run; pass --resume to continue it"
            )
        self.run_dir.mkdir(parents=True, exist_ok=True)
        for key in ("samples", "plans", "values", "features"):
            paths[key].mkdir(parents=True, exist_ok=True)
        with FileLock(paths["lock"]):
            self.config.write_ini(str(paths["config"]))
            self.backend = self._make_backend()
            self.ctx = agents.AgentContext(
                backend=self.backend,
                model_id=self.config.model_id,
                temperature=self.config.temperature,
            )
            self.pubmed_index = retrieval.load_index(self.config.pubmed_index)
            self.nct_index = retrieval.load_index(self.config.nct_index)
            self.plans_store = PlanStore(paths["plans"])
            self.values = ValueStore(paths["values"])
            self._load_samples(paths)
            tree = None
            if resume and paths["tree"].exists():
                tree = search.SearchTree.from_dict(
                    json.loads(paths["tree"].read_text(encoding="utf-8"))
                )
            ctx = search.SearchContext(
                initialize=self._initialize,
                propose=self._propose,
                make_plan=self._make_plan,
                apply_action=apply_proposal,
                simulate=self._simulate,
                evaluate_node=self._evaluate_node,
                log=self._log,
            )
            if tree is not None:
                for node in tree.nodes.values():
                    ctx.plan_sets[node.plan_set_hash] = self.plans_store.load(node.plan_set_hash)
            self._phase = "search"

            def checkpoint(t: search.SearchTree) -> None:
                _dump_json(paths["tree"], t.to_dict())

            best_plans, best_bundle, tree = search.run_search(
                self.config.search,
                ctx,
                tree=tree,
                checkpoint=checkpoint,
                on_rollout=self._on_rollout,
                stop_at_score=self.config.stop_at_score,
            )
            self._phase = "test"
            report = self._final_report(tree, best_plans, best_bundle, paths)
            report.wall_clock_seconds = time.monotonic() - started
            self._write_outputs(report, paths)
        return report

    def _load_samples(self, paths: dict[str, Path]) -> None:
        sample_paths = {k: paths["samples"] / f"{k}.csv" for k in ("train", "valid", "test")}
        if all(p.exists() for p in sample_paths.values()):
            self.train_records = load_trials_csv(str(sample_paths["train"]))
            self.valid_records = load_trials_csv(str(sample_paths["valid"]))
            self.test_records = load_trials_csv(str(sample_paths["test"]))
            return
        seed = self.config.search.seed
        train_pool = load_trials_csv(self.config.train_csv)
        if Path(self.config.valid_csv).resolve() == Path(self.config.train_csv).resolve():
            # Train and validation drawn disjointly from the same pool.
            self.train_records = stratified_sample(train_pool, self.config.train_size, derive_seed(seed, "sample:train"))
            taken = {t.nct_id for t in self.train_records}
            rest = [t for t in train_pool if t.nct_id not in taken]
            self.valid_records = stratified_sample(rest, self.config.valid_size, derive_seed(seed, "sample:valid"))
        else:
            valid_pool = load_trials_csv(self.config.valid_csv)
            self.train_records = stratified_sample(train_pool, self.config.train_size, derive_seed(seed, "sample:train"))
            self.valid_records = stratified_sample(valid_pool, self.config.valid_size, derive_seed(seed, "sample:valid"))
        test_pool = load_trials_csv(self.config.test_csv)
        self.test_records = stratified_sample(test_pool, self.config.test_size, derive_seed(seed, "sample:test"))
        write_trials_csv(self.train_records, str(sample_paths["train"]))
        write_trials_csv(self.valid_records, str(sample_paths["valid"]))
        write_trials_csv(self.test_records, str(sample_paths["test"]))

    # -- final evaluation and report ------------------------------------------

    def _final_report(self, tree, best_plans, best_bundle, paths) -> RunReport:
        digest = search.plan_set_hash(best_plans)
        X_train, X_valid = self._matrices[digest]
        y_valid = np.array([t.label for t in sorted(self.valid_records, key=lambda t: t.nct_id)])
        self._build_missing(best_plans, self.test_records)
        X_test = self._encode(best_plans, self.test_records)
        modeling.write_matrix_csv(X_test, str(paths["features"] / f"{digest}.test.csv"))
        y_test = np.array([t.label for t in sorted(self.test_records, key=lambda t: t.nct_id)])
        valid_probs = best_bundle.predict_proba(X_valid.X)
        test_probs = best_bundle.predict_proba(X_test.X)
        _write_scores(paths["tree"].parent / "scores_valid.csv", X_valid.nct_ids, y_valid, valid_probs)
        _write_scores(paths["tree"].parent / "scores_test.csv", X_test.nct_ids, y_test, test_probs)

        logistic = best_bundle.models["logistic_regression"]
        background = X_train.column_means()
        attribution_model = (
            "selected" if best_bundle.selected == "logistic_regression" else "logistic_surrogate"
        )
        shap_rows = []
        for i, nct in enumerate(X_test.nct_ids):
            if isinstance(logistic, modeling.LogisticModel):
                phi = modeling.linear_shap(logistic, X_test.X[i], background)
                order = np.argsort(-np.abs(phi), kind="stable")[:SHAP_TOP_CONTRIBUTIONS]
                contributions = [[X_test.columns[j], float(phi[j])] for j in order]
            else:
                contributions = []
            shap_rows.append(
                {
                    "nct_id": nct,
                    "probability": float(test_probs[i]),
                    "attribution_model": attribution_model,
                    "contributions": contributions,
                }
            )
        perm = modeling.permutation_importance(
            best_bundle.models[best_bundle.selected],
            X_valid.X,
            y_valid,
            metric=self.config.metric,
            seed=derive_seed(self.config.search.seed, "permimp"),
        )
        nodes = [
            {
                "id": node.id,
                "action": node.action.summary() if node.action else "root",
                "score": node.score,
                "q": node.q,
                "n": node.n,
                "depth": node.depth,
            }
            for node in (tree.nodes[i] for i in sorted(tree.nodes))
        ]
        return RunReport(
            nodes=nodes,
            best={
                "node": tree.best_id,
                "plan_set_hash": digest,
                "selected_model": best_bundle.selected,
                "validation": modeling.metric_report(valid_probs, y_valid).to_dict(),
                "test": modeling.metric_report(test_probs, y_test).to_dict(),
            },
            final_plans={name: plan.to_dict() for name, plan in sorted(best_plans.items())},
            feature_importances=dict(
                sorted(modeling.importances(best_bundle, X_valid).items(), key=lambda kv: (-kv[1], kv[0]))
            ),
            permutation_importances={
                X_valid.columns[j]: float(perm[j]) for j in range(len(X_valid.columns))
            },
            shap=shap_rows,
            llm_calls={
                "total": self.backend.calls,
                "cache_hits": self.backend.hits,
                "cache_misses": self.backend.misses,
            },
        )

    def _write_outputs(self, report: RunReport, paths: dict[str, Path]) -> None:
        _dump_json(paths["report_json"], report.to_dict())
        paths["report_txt"].write_text(render_report_text(report.to_dict()), encoding="utf-8")
        with open(paths["tool_log"], "w", encoding="utf-8") as fh:
            for entry in sorted(
                self._tool_records,
                key=lambda e: (e["phase"], e["subject_nct_id"], e["tool"], json.dumps(e["args"], sort_keys=True)),
            ):
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        _dump_json(
            paths["meta"],
            {
                "format_version": RUN_FORMAT_VERSION,
                "wall_clock_seconds": report.wall_clock_seconds,
                "backend": self.config.llm_backend,
                "llm_calls": report.llm_calls,
            },
        )


def _write_scores(path: Path, nct_ids, labels, probs) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("nct_id,label,probability\n")
        for nct, y, p in zip(nct_ids, labels, probs):
            fh.write(f"{nct},{int(y)},{float(p)!r}\n")


def run(config: RunConfig, resume: bool = False, **runner_kwargs) -> RunReport:
    return Runner(config, **runner_kwargs).run(resume=resume)


# ---------------------------------------------------------------------------
# Rendering persisted runs
# ---------------------------------------------------------------------------

def render_report_text(report: dict) -> str:
    lines = ["run summary", "==========="]
    lines.append("")
    lines.append(f"{'id':>4} {'action':<40} {'score':>8} {'q':>8} {'n':>4} {'depth':>5}")
    for node in report["nodes"]:
        lines.append(
            f"{node['id']:>4} {node['action'][:40]:<40} {node['score']:>8.4f} "
            f"{node['q']:>8.4f} {node['n']:>4} {node['depth']:>5}"
        )
    best = report["best"]
    lines.append("")
    lines.append(f"best node: {best['node']} (model: {best['selected_model']})")
    for split in ("validation", "test"):
        m = best[split]
        lines.append(
            f"  {split}: roc_auc={m['roc_auc']:.4f} pr_auc={m['pr_auc']:.4f} f1={m['f1']:.4f}"
        )
    lines.append("")
    lines.append("feature importances (selected model):")
    for name, value in report["feature_importances"].items():
        lines.append(f"  {name}: {value:.6f}")
    return "\n".join(lines) + "\n"


def render_shap_svg(entry: dict, width: int = 640, bar_height: int = 18) -> str:
    """Horizontal bar chart of per-column contributions, positive right /
    negative left. Pure string assembly so repeated renders are byte-identical."""
    contributions = entry["contributions"]
    n = len(contributions)
    height = 40 + n * (bar_height + 6)
    mid = width // 2
    max_abs = max((abs(v) for _, v in contributions), default=1.0) or 1.0
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="monospace" font-size="11">',
        f'<text x="8" y="16">{entry["nct_id"]} probability={entry["probability"]:.3f}</text>',
        f'<line x1="{mid}" y1="28" x2="{mid}" y2="{height - 4}" stroke="#888"/>',
    ]
    for i, (name, value) in enumerate(contributions):
        y = 32 + i * (bar_height + 6)
        length = int(abs(value) / max_abs * (width / 2 - 60))
        if value >= 0:
            x, color, label_x, anchor = mid, "#2a9d4e", mid + length + 6, "start"
        else:
            x, color, label_x, anchor = mid - length, "#c0392b", mid - length - 6, "end"
        parts.append(f'<rect x="{x}" y="{y}" width="{max(length, 1)}" height="{bar_height}" fill="{color}"/>')
        parts.append(
            f'<text x="{label_x}" y="{y + bar_height - 5}" text-anchor="{anchor}">'
            f"{name} ({value:+.4f})</text>"
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def verify_run_dir(run_dir: str) -> None:
    """Cross-check tree.json against the plan store; raise CorruptRun on drift."""
    root = Path(run_dir)
    tree_path = root / "tree.json"
    if not tree_path.exists():
        raise CorruptRun(f"{run_dir} has no tree.json")
    tree_doc = json.loads(tree_path.read_text(encoding="utf-8"))
    if tree_doc.get("format_version", 0) > search.TREE_FORMAT_VERSION:
        raise CorruptRun(
            f"tree format version {tree_doc.get('format_version')} is newer than supported"
        )
    store = PlanStore(root / "plans")
    for node in tree_doc["nodes"]:
        store.load(node["plan_set_hash"])  # raises CorruptRun on miss/mismatch


def render_checkpoint_text(run_dir: str) -> str:
    """Summary for a run that was checkpointed but never finished."""
    tree_doc = json.loads((Path(run_dir) / "tree.json").read_text(encoding="utf-8"))
    lines = [
        "run in progress",
        "===============",
        "",
        f"rollouts done: {tree_doc['rollouts_done']}",
        f"best node so far: {tree_doc['best']['node']} (score {tree_doc['best']['score']:.4f})",
        "",
        f"{'id':>4} {'score':>8} {'q':>8} {'n':>4} {'depth':>5} {'pending':>7}",
    ]
    for node in tree_doc["nodes"]:
        lines.append(
            f"{node['id']:>4} {node['score']:>8.4f} {node['q']:>8.4f} "
            f"{node['n']:>4} {node['depth']:>5} {node['pending_count']:>7}"
        )
    return "\n".join(lines) + "\n"


def report(run_dir: str, trial: str | None = None) -> str:
    """Render the persisted report; no model or LLM work happens here."""
    root = Path(run_dir)
    report_path = root / "report.json"
    if not report_path.exists():
        if (root / "tree.json").exists():
            if trial is not None:
                raise CorruptRun(f"{run_dir} is unfinished; per-trial charts need a completed run")
            verify_run_dir(run_dir)
            return render_checkpoint_text(run_dir)
        raise CorruptRun(f"{run_dir} has neither report.json nor tree.json")
    doc = json.loads(report_path.read_text(encoding="utf-8"))
    if doc.get("format_version", 0) > RUN_FORMAT_VERSION:
        raise CorruptRun(f"report format version {doc.get('format_version')} is newer than supported")
    verify_run_dir(run_dir)
    text = render_report_text(doc)
    if trial is not None:
        entry = next((e for e in doc["shap"] if e["nct_id"] == trial), None)
        if entry is None:
            raise CorruptRun(f"trial {trial} is not in the test sample of {run_dir}")
        svg_path = root / f"shap_{trial}.svg"
        svg_path.write_text(render_shap_svg(entry), encoding="utf-8")
        text += f"\nSHAP chart for {trial} written to {svg_path}\n"
    return text
