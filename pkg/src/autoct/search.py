"""Tree search over feature-set states.

Each node is a feature-plan set; each edge an Add/Refine/Remove action. One
rollout = select a node by UCT, pop one pending evaluator suggestion, turn it
into an action, rebuild/retrain, score on validation, backpropagate.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable

from .agents import Suggestion
from .domain import FeaturePlan, ProposalAction, SearchConfig
from .llm import BackendError

TREE_FORMAT_VERSION = 1
MAX_CHILDREN = 6  # evaluator yields at most 6 proposals per node


class SearchError(Exception):
    pass


class SearchExhausted(SearchError):
    """No node anywhere has pending suggestions within the depth budget."""


class DepthExceeded(SearchError):
    pass


def plan_set_hash(plans: dict[str, FeaturePlan]) -> str:
    canonical = json.dumps(
        {name: plan.to_dict() for name, plan in sorted(plans.items())},
        sort_keys=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass
class SearchNode:
    id: int
    parent: int | None
    action: ProposalAction | None  # None only at the root
    plan_set_hash: str
    score: float  # this node's own validation score
    depth: int
    q: float = 0.0  # cumulative backpropagated reward
    n: int = 0  # visit count
    pending: list[Suggestion] = field(default_factory=list)
    children: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "parent": self.parent,
            "action": self.action.to_dict() if self.action else None,
            "plan_set_hash": self.plan_set_hash,
            "score": self.score,
            "depth": self.depth,
            "q": self.q,
            "n": self.n,
            "pending": [s.to_dict() for s in self.pending],
            "pending_count": len(self.pending),
            "children": list(self.children),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SearchNode":
        return cls(
            id=d["id"],
            parent=d["parent"],
            action=ProposalAction.from_dict(d["action"]) if d.get("action") else None,
            plan_set_hash=d["plan_set_hash"],
            score=d["score"],
            depth=d["depth"],
            q=d["q"],
            n=d["n"],
            pending=[Suggestion(s["text"], s["origin"]) for s in d.get("pending", [])],
            children=list(d.get("children", [])),
        )


@dataclass
class SearchTree:
    nodes: dict[int, SearchNode] = field(default_factory=dict)
    root_id: int = 0
    best_id: int = 0
    best_score: float = -math.inf
    rollouts_done: int = 0
    next_id: int = 0
    max_depth: int = 10

    def new_node(self, **kwargs) -> SearchNode:
        node = SearchNode(id=self.next_id, **kwargs)
        self.nodes[node.id] = node
        if node.parent is not None:
            self.nodes[node.parent].children.append(node.id)
        self.next_id += 1
        return node

    def record_score(self, node_id: int, score: float) -> None:
        if score > self.best_score:
            self.best_id, self.best_score = node_id, score

    def to_dict(self) -> dict:
        return {
            "format_version": TREE_FORMAT_VERSION,
            "root": self.root_id,
            "best": {"node": self.best_id, "score": self.best_score},
            "rollouts_done": self.rollouts_done,
            "next_id": self.next_id,
            "max_depth": self.max_depth,
            "nodes": [self.nodes[i].to_dict() for i in sorted(self.nodes)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SearchTree":
        if d.get("format_version", 0) > TREE_FORMAT_VERSION:
            raise SearchError(f"tree format {d.get('format_version')} is newer than supported")
        tree = cls(
            root_id=d["root"],
            best_id=d["best"]["node"],
            best_score=d["best"]["score"],
            rollouts_done=d["rollouts_done"],
            next_id=d["next_id"],
            max_depth=d.get("max_depth", 10),
        )
        for nd in d["nodes"]:
            tree.nodes[nd["id"]] = SearchNode.from_dict(nd)
        return tree


def uct(node: SearchNode, parent_n: int, alpha: float) -> float:
    """q/n + alpha * sqrt(ln(parent_n) / n); unvisited nodes rank first."""
    if parent_n < 1:
        raise SearchError("parent_n must be >= 1")
    if node.n == 0:
        return math.inf
    return node.q / node.n + alpha * math.sqrt(math.log(parent_n) / node.n)


def backpropagate(tree: SearchTree, node_id: int, reward: float) -> None:
    """Add the reward to the node and every ancestor, bump visit counts."""
    current: int | None = node_id
    while current is not None:
        node = tree.nodes[current]
        node.q += reward
        node.n += 1
        current = node.parent


def _expandable(node: SearchNode, max_depth: int) -> bool:
    return bool(node.pending) and node.depth < max_depth


def _live(tree: SearchTree, node: SearchNode, max_depth: int) -> bool:
    if _expandable(node, max_depth):
        return True
    return any(_live(tree, tree.nodes[c], max_depth) for c in node.children)


def select(tree: SearchTree, alpha: float, max_depth: int) -> list[int]:
    """UCT descent from the root to the first node with pending suggestions.

    Dead branches (nothing expandable underneath) are skipped; ties break on
    the lowest node id.
    """
    node = tree.nodes[tree.root_id]
    path = [node.id]
    while True:
        if _expandable(node, max_depth):
            return path
        live = [tree.nodes[c] for c in node.children if _live(tree, tree.nodes[c], max_depth)]
        if not live:
            raise SearchExhausted(f"no expandable node under node {node.id}")
        best = None
        best_value = -math.inf
        for child in sorted(live, key=lambda c: c.id):
            value = uct(child, max(node.n, 1), alpha)
            if value > best_value:
                best, best_value = child, value
        node = best
        path.append(node.id)


@dataclass
class SearchContext:
    """Capabilities the search needs from the surrounding pipeline.

    plan_sets holds the live plan map per plan_set_hash; simulate() builds
    any missing feature values, trains and returns the validation score.
    """

    initialize: Callable[[], tuple[dict[str, FeaturePlan], float, object]]
    propose: Callable[[Suggestion, dict[str, FeaturePlan]], ProposalAction]
    make_plan: Callable[[ProposalAction], FeaturePlan | None]
    apply_action: Callable[[dict[str, FeaturePlan], ProposalAction, FeaturePlan | None], dict[str, FeaturePlan]]
    simulate: Callable[[dict[str, FeaturePlan]], tuple[float, object]]
    evaluate_node: Callable[[int, dict[str, FeaturePlan], object, float], list[Suggestion]]
    plan_sets: dict[str, dict[str, FeaturePlan]] = field(default_factory=dict)
    log: Callable[[str], None] = lambda _msg: None

    def register(self, plans: dict[str, FeaturePlan]) -> str:
        digest = plan_set_hash(plans)
        self.plan_sets[digest] = plans
        return digest


def expand_and_simulate(tree: SearchTree, node_id: int, ctx: SearchContext) -> tuple[int, float] | None:
    """Consume one pending suggestion at the node; create and score one child.

    Agent failures consume the suggestion and skip the expansion (returns
    None). Search-contract violations and backend failures raise.
    """
    node = tree.nodes[node_id]
    if not node.pending:
        raise SearchError(f"node {node_id} has no pending suggestions")
    if node.depth >= tree.max_depth:
        raise DepthExceeded(f"node {node_id} is at the depth limit {tree.max_depth}")
    suggestion = node.pending.pop(0)
    plans = ctx.plan_sets[node.plan_set_hash]
    try:
        action = ctx.propose(suggestion, plans)
        new_plan = ctx.make_plan(action)
        child_plans = ctx.apply_action(plans, action, new_plan)
        score, bundle = ctx.simulate(child_plans)
    except BackendError:
        raise  # a dead backend (or replay cache miss) must abort the run
    except Exception as exc:  # noqa: BLE001 - expansion failures are logged, never fatal
        ctx.log(f"expansion of node {node_id} skipped: {type(exc).__name__}: {exc}")
        return None
    child_hash = ctx.register(child_plans)
    child = tree.new_node(
        parent=node_id,
        action=action,
        plan_set_hash=child_hash,
        score=score,
        depth=node.depth + 1,
    )
    try:
        child.pending = list(ctx.evaluate_node(child.id, child_plans, bundle, score))[:MAX_CHILDREN]
    except BackendError:
        raise
    except Exception as exc:  # noqa: BLE001 - the node stands, it just cannot expand
        ctx.log(f"evaluator failed at node {child.id}: {type(exc).__name__}: {exc}")
        child.pending = []
    tree.record_score(child.id, score)
    return child.id, score


def run_search(
    config: SearchConfig,
    ctx: SearchContext,
    tree: SearchTree | None = None,
    checkpoint: Callable[[SearchTree], None] | None = None,
    on_rollout: Callable[[SearchTree], None] | None = None,
    stop_at_score: float | None = None,
) -> tuple[dict[str, FeaturePlan], object, SearchTree]:
    """The full loop: initialize the root, then up to config.rollouts
    iterations of select / expand / backpropagate. Returns the plan set and
    retrained bundle of the best-scoring node plus the final tree."""
    save = checkpoint or (lambda _tree: None)
    if tree is None:
        plans0, score0, bundle0 = ctx.initialize()
        tree = SearchTree(max_depth=config.max_depth)
        root = tree.new_node(
            parent=None, action=None, plan_set_hash=ctx.register(plans0), score=score0, depth=0
        )
        backpropagate(tree, root.id, score0)
        tree.record_score(root.id, score0)
        try:
            root.pending = list(ctx.evaluate_node(root.id, plans0, bundle0, score0))[:MAX_CHILDREN]
        except BackendError:
            raise
        except Exception as exc:  # noqa: BLE001
            ctx.log(f"evaluator failed at the root: {type(exc).__name__}: {exc}")
            root.pending = []
        save(tree)
    else:
        tree.max_depth = config.max_depth
    while tree.rollouts_done < config.rollouts:
        if stop_at_score is not None and tree.best_score >= stop_at_score:
            ctx.log(f"stopping early: best score {tree.best_score:.4f} >= {stop_at_score}")
            break
        try:
            path = select(tree, config.exploration_weight, config.max_depth)
        except SearchExhausted:
            ctx.log("search exhausted: no expandable nodes remain")
            break
        result = expand_and_simulate(tree, path[-1], ctx)
        if result is not None:
            child_id, score = result
            backpropagate(tree, child_id, score)
        tree.rollouts_done += 1
        save(tree)
        if on_rollout is not None:
            on_rollout(tree)
    best_plans = ctx.plan_sets[tree.nodes[tree.best_id].plan_set_hash]
    _score, best_bundle = ctx.simulate(best_plans)
    return best_plans, best_bundle, tree


def audit_tree(tree: SearchTree) -> list[str]:
    """Bookkeeping invariants; returns human-readable problems (empty = ok)."""
    problems: list[str] = []

    def subtree(node_id: int) -> tuple[int, float]:
        node = tree.nodes[node_id]
        count, total = 1, node.score
        for child_id in node.children:
            child = tree.nodes[child_id]
            if child.parent != node_id:
                problems.append(f"node {child_id} parent link mismatch")
            c, t = subtree(child_id)
            count += c
            total += t
        if node.n != count:
            problems.append(f"node {node_id}: n={node.n} != simulated descendants {count}")
        if abs(node.q - total) > 1e-12:
            problems.append(f"node {node_id}: q={node.q!r} != subtree score sum {total!r}")
        if len(node.children) > MAX_CHILDREN:
            problems.append(f"node {node_id}: {len(node.children)} children > {MAX_CHILDREN}")
        return count, total

    subtree(tree.root_id)
    max_score = max(node.score for node in tree.nodes.values())
    if abs(tree.best_score - max_score) > 1e-12:
        problems.append(f"best score {tree.best_score!r} != max node score {max_score!r}")
    return problems
