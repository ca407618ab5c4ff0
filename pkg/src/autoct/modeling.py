"""Feature encoding, the three classical models, ranking metrics, importances
and exact linear SHAP attributions.

Hyperparameters are fixed on purpose (no tuning): logistic regression with L2
at lambda=1.0, random forest with 100 trees of depth 6, gradient boosting with
100 rounds of depth-3 trees at learning rate 0.1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from sklearn.ensemble import GradientBoostingClassifier, RandomForestClassifier

LOGISTIC_L2 = 1.0
LOGISTIC_MAX_ITER = 10_000
LOGISTIC_GRAD_TOL = 1e-6
F1_THRESHOLD = 0.5

MODEL_ORDER = ("logistic_regression", "random_forest", "gradient_boosting")


class ModelingError(Exception):
    pass


class UndefinedMetric(ModelingError):
    """The metric is undefined for this label vector (e.g. a single class)."""


# ---------------------------------------------------------------------------
# Encoding
# ---------------------------------------------------------------------------

@dataclass
class DesignMatrix:
    """Wide numeric table: rows in ascending nct_id order, no NaN entries.

    One-hot columns are named ``base=category`` and every sub-feature gets a
    ``base__missing`` indicator; ``column_feature`` maps each column back to
    its owning feature name.
    """

    nct_ids: list[str]
    columns: list[str]
    column_feature: list[str]
    X: np.ndarray

    def column_means(self) -> np.ndarray:
        return self.X.mean(axis=0) if len(self.nct_ids) else np.zeros(len(self.columns))


def _column_base(feature_name: str, sub: str) -> str:
    return feature_name if sub == "value" else f"{feature_name}.{sub}"


def encoding_columns(plans: dict) -> list[tuple[str, str, str, str | None]]:
    """Deterministic column layout: (column, feature, sub, category|None).

    Features sorted by name; sub-features and categories in declared order.
    The trailing None-category entry per sub-feature is its missing flag.
    """
    layout: list[tuple[str, str, str, str | None]] = []
    for name in sorted(plans):
        plan = plans[name]
        for sub, ftype in plan.feature_type.items():
            base = _column_base(name, sub)
            if ftype in ("categorical", "multicategorical"):
                for cat in plan.possible_values.get(sub, []):
                    layout.append((f"{base}={cat}", name, sub, cat))
            else:
                layout.append((base, name, sub, ""))
            layout.append((f"{base}__missing", name, sub, None))
    return layout


def encode(plans: dict, value_sets: list) -> DesignMatrix:
    """Encode built feature values into the design matrix.

    Numeric and boolean values land as-is (missing imputed to 0), categorical
    one-hot and multicategorical multi-hot over the plan's declared values;
    every sub-feature carries a missing indicator. Constant columns are kept.
    """
    ordered = sorted(value_sets, key=lambda vs: vs.nct_id)
    layout = encoding_columns(plans)
    X = np.zeros((len(ordered), len(layout)), dtype=np.float64)
    for i, vs in enumerate(ordered):
        for j, (_, feature, sub, category) in enumerate(layout):
            value = (vs.values.get(feature) or {}).get(sub)
            if category is None:  # missing indicator
                X[i, j] = 1.0 if value is None else 0.0
            elif value is None:
                X[i, j] = 0.0
            elif category == "":  # numeric / boolean column
                X[i, j] = float(value)
            elif isinstance(value, (list, tuple)):
                X[i, j] = 1.0 if category in value else 0.0
            else:
                X[i, j] = 1.0 if value == category else 0.0
    return DesignMatrix(
        nct_ids=[vs.nct_id for vs in ordered],
        columns=[col for col, *_ in layout],
        column_feature=[feature for _, feature, *_ in layout],
        X=X,
    )


def write_matrix_csv(matrix: DesignMatrix, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(["nct_id"] + matrix.columns) + "\n")
        for i, nct in enumerate(matrix.nct_ids):
            fh.write(",".join([nct] + [repr(float(v)) for v in matrix.X[i]]) + "\n")


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------

@dataclass
class LogisticModel:
    """L2-regularized logistic regression (intercept unpenalized).

    Objective: sum_i log(1 + exp(-y_i (w.x_i + b))) + (lambda/2) ||w||^2
    with y in {-1, +1}, minimized to max-gradient < 1e-6 or 10,000 iterations.
    """

    weights: np.ndarray
    intercept: float
    grad_norm: float = 0.0

    def decision(self, X: np.ndarray) -> np.ndarray:
        return X @ self.weights + self.intercept

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        z = np.clip(self.decision(X), -700, 700)
        return 1.0 / (1.0 + np.exp(-z))


def logistic_objective(X: np.ndarray, y01: np.ndarray, lam: float = LOGISTIC_L2):
    """Loss and gradient closure shared by the trainer and its test oracle."""
    ys = 2.0 * np.asarray(y01, dtype=np.float64) - 1.0

    def fun(theta: np.ndarray):
        w, b = theta[:-1], theta[-1]
        z = ys * (X @ w + b)
        loss = float(np.logaddexp(0.0, -z).sum() + 0.5 * lam * (w @ w))
        p = 1.0 / (1.0 + np.exp(np.clip(z, -700, 700)))
        gw = -(X.T @ (ys * p)) + lam * w
        gb = -float((ys * p).sum())
        return loss, np.concatenate([gw, [gb]])

    return fun


def fit_logistic(X: np.ndarray, y: np.ndarray, lam: float = LOGISTIC_L2) -> LogisticModel:
    fun = logistic_objective(X, y, lam)
    res = minimize(
        fun,
        np.zeros(X.shape[1] + 1),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": LOGISTIC_MAX_ITER, "gtol": 1e-8, "ftol": 1e-14},
    )
    _, grad = fun(res.x)
    return LogisticModel(weights=res.x[:-1].copy(), intercept=float(res.x[-1]), grad_norm=float(np.abs(grad).max()))


class _ConstantModel:
    """Stand-in when training labels are degenerate (a single class)."""

    def __init__(self, probability: float):
        self.probability = float(probability)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return np.full(X.shape[0], self.probability)


class _SklearnProba:
    def __init__(self, estimator):
        self.estimator = estimator

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return self.estimator.predict_proba(X)[:, 1]


@dataclass
class TrainedModelBundle:
    models: dict  # name -> model exposing predict_proba(X) -> 1-D probabilities
    degenerate: bool = False
    validation_scores: dict[str, float] = field(default_factory=dict)
    selected: str | None = None

    def predict_proba(self, X: np.ndarray, model: str | None = None) -> np.ndarray:
        name = model or self.selected or MODEL_ORDER[0]
        return self.models[name].predict_proba(X)

    def evaluate_and_select(self, X_val: np.ndarray, y_val: np.ndarray, metric: str = "roc_auc") -> str:
        """Score all three models on validation and pick the argmax.

        Ties resolve in the fixed order LR < RF < GBT (earliest wins).
        """
        metric_fn = METRIC_FUNCTIONS[metric]
        best_name, best_score = None, -np.inf
        for name in MODEL_ORDER:
            score = float(metric_fn(self.models[name].predict_proba(X_val), y_val))
            self.validation_scores[name] = score
            if score > best_score:
                best_name, best_score = name, score
        self.selected = best_name
        return best_name


def train(matrix: DesignMatrix, y, seed: int = 0) -> TrainedModelBundle:
    """Fit the three models; deterministic for a fixed seed.

    Degenerate labels (a single class) yield constant predictors, flagged.
    """
    y = np.asarray(y, dtype=np.float64)
    X = matrix.X
    if X.shape[0] < 1:
        raise ModelingError("cannot train on an empty matrix")
    classes = set(np.unique(y).tolist())
    if not classes.issubset({0.0, 1.0}):
        raise ModelingError("labels must be binary 0/1")
    if len(classes) < 2:
        constant = _ConstantModel(y[0] if len(y) else 0.0)
        return TrainedModelBundle(models={name: constant for name in MODEL_ORDER}, degenerate=True)
    rf_seed = seed % (2**32)
    rf = RandomForestClassifier(n_estimators=100, max_depth=6, random_state=rf_seed, n_jobs=1)
    rf.fit(X, y)
    gbt = GradientBoostingClassifier(
        n_estimators=100, max_depth=3, learning_rate=0.1, random_state=rf_seed
    )
    gbt.fit(X, y)
    return TrainedModelBundle(
        models={
            "logistic_regression": fit_logistic(X, y),
            "random_forest": _SklearnProba(rf),
            "gradient_boosting": _SklearnProba(gbt),
        }
    )


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def roc_auc(scores, labels) -> float:
    """P(score+ > score-) + 0.5 P(score+ = score-) over all pos-neg pairs."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise UndefinedMetric("roc_auc needs both classes")
    # Average ranks over the pooled scores (Mann-Whitney form).
    pooled = np.concatenate([pos, neg])
    order = np.argsort(pooled, kind="mergesort")
    ranks = np.empty(len(pooled), dtype=np.float64)
    sorted_scores = pooled[order]
    i = 0
    while i < len(pooled):
        j = i
        while j + 1 < len(pooled) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    rank_sum_pos = float(ranks[: len(pos)].sum())
    return (rank_sum_pos - len(pos) * (len(pos) + 1) / 2.0) / (len(pos) * len(neg))


def pr_auc(scores, labels) -> float:
    """Average precision over descending-score thresholds, ties grouped."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    if n_pos == 0:
        raise UndefinedMetric("pr_auc needs at least one positive")
    ap = 0.0
    tp = fp = 0
    prev_recall = 0.0
    for threshold in sorted(set(scores.tolist()), reverse=True):
        group = scores == threshold
        tp += int((labels[group] == 1).sum())
        fp += int((labels[group] == 0).sum())
        precision = tp / (tp + fp)
        recall = tp / n_pos
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def confusion_counts(scores, labels, threshold: float = F1_THRESHOLD) -> dict[str, int]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pred = scores >= threshold
    return {
        "tp": int(((labels == 1) & pred).sum()),
        "fp": int(((labels == 0) & pred).sum()),
        "fn": int(((labels == 1) & ~pred).sum()),
        "tn": int(((labels == 0) & ~pred).sum()),
    }


def f1(scores, labels) -> float:
    """F1 at the fixed 0.5 threshold; 0 when precision or recall is undefined."""
    c = confusion_counts(scores, labels)
    if c["tp"] == 0:
        return 0.0
    precision = c["tp"] / (c["tp"] + c["fp"])
    recall = c["tp"] / (c["tp"] + c["fn"])
    return 2.0 * precision * recall / (precision + recall)


METRIC_FUNCTIONS = {"roc_auc": roc_auc, "pr_auc": pr_auc, "f1": f1}


@dataclass(frozen=True)
class MetricReport:
    roc_auc: float
    pr_auc: float
    f1: float
    confusion: dict[str, int]

    def to_dict(self) -> dict:
        return {"roc_auc": self.roc_auc, "pr_auc": self.pr_auc, "f1": self.f1, "confusion": self.confusion}


def metric_report(scores, labels) -> MetricReport:
    return MetricReport(
        roc_auc=roc_auc(scores, labels),
        pr_auc=pr_auc(scores, labels),
        f1=f1(scores, labels),
        confusion=confusion_counts(scores, labels),
    )


# ---------------------------------------------------------------------------
# Importances and attributions
# ---------------------------------------------------------------------------

def column_importances(bundle: TrainedModelBundle, model: str | None = None) -> np.ndarray:
    """|weight| for the logistic model, normalized impurity decrease for trees."""
    name = model or bundle.selected or MODEL_ORDER[0]
    fitted = bundle.models[name]
    if isinstance(fitted, LogisticModel):
        return np.abs(fitted.weights)
    if isinstance(fitted, _ConstantModel):
        return np.zeros(0)
    return np.asarray(fitted.estimator.feature_importances_, dtype=np.float64)


def importances(bundle: TrainedModelBundle, matrix: DesignMatrix, model: str | None = None) -> dict[str, float]:
    """Per-column importances of the selected model, summed per feature name."""
    per_column = column_importances(bundle, model)
    out: dict[str, float] = {}
    for j, feature in enumerate(matrix.column_feature):
        if j < len(per_column):
            out[feature] = out.get(feature, 0.0) + float(per_column[j])
        else:
            out.setdefault(feature, 0.0)
    return out


def linear_shap(model: LogisticModel, x: np.ndarray, background: np.ndarray) -> np.ndarray:
    """Exact Shapley attributions on the logit scale: phi_j = w_j (x_j - mu_j).

    Local accuracy holds by construction: sum(phi) equals the logit at x
    minus the logit at the background.
    """
    return model.weights * (np.asarray(x, dtype=np.float64) - np.asarray(background, dtype=np.float64))


def permutation_importance(
    model,
    X_valid: np.ndarray,
    y_valid: np.ndarray,
    metric: str = "roc_auc",
    seed: int = 0,
    repeats: int = 5,
) -> np.ndarray:
    """Mean metric drop when each column is permuted; seeded and deterministic."""
    metric_fn = METRIC_FUNCTIONS[metric]
    rng = np.random.default_rng(seed)
    base = metric_fn(model.predict_proba(X_valid), y_valid)
    drops = np.zeros(X_valid.shape[1], dtype=np.float64)
    for j in range(X_valid.shape[1]):
        total = 0.0
        for _ in range(repeats):
            perm = rng.permutation(X_valid.shape[0])
            shuffled = X_valid.copy()
            shuffled[:, j] = X_valid[perm, j]
            total += base - metric_fn(model.predict_proba(shuffled), y_valid)
        drops[j] = total / repeats
    return drops
