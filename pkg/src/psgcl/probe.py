"""Linear probes on frozen embeddings and the metrics used to score them."""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LogisticRegression
from sklearn.preprocessing import StandardScaler

from .embeddings import EmbeddingSet
from .modalities import AGE_GROUPS, SEXES, STAGE_NAMES

log = logging.getLogger(__name__)

# task -> (label field, class names, binary?)
TASKS = {
    "stage5": ("stage_label", STAGE_NAMES, False),
    "sdb": ("sdb_label", ("no SDB", "SDB"), True),
    "age4": ("age_group", AGE_GROUPS, False),
    "sex": ("sex", SEXES, True),
}
STRATA = {"none": None, "age": "age_group", "sex": "sex"}
STRATUM_NAMES = {"age_group": AGE_GROUPS, "sex": SEXES}
FEW_SHOT_K = (1, 2, 4, 8, 16, 32, 64, 128, "all")


class UndefinedMetric(ValueError):
    pass


# metrics ---------------------------------------------------------------------

def _binary(labels) -> np.ndarray:
    y = np.asarray(labels)
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    return y.astype(bool)


def auroc(scores, labels) -> float:
    """Mann-Whitney U over n_pos * n_neg; tied pairs count one half."""
    s = np.asarray(scores, dtype=float)
    y = _binary(labels)
    n1 = int(y.sum())
    n0 = len(y) - n1
    if n1 == 0 or n0 == 0:
        raise UndefinedMetric("AUROC needs both positive and negative samples")
    r = rankdata(s)
    u = r[y].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def auprc(scores, labels) -> float:
    """Average precision: precision summed over recall increments, one step per distinct score."""
    s = np.asarray(scores, dtype=float)
    y = _binary(labels)
    n1 = int(y.sum())
    if n1 == 0:
        raise UndefinedMetric("AUPRC needs at least one positive sample")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tps = np.cumsum(y)[last]
    precision = tps / (last + 1)
    recall = tps / n1
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def f1_score(predicted, labels) -> float:
    p = _binary(predicted)
    y = _binary(labels)
    tp = np.sum(p & y)
    denom = p.sum() + y.sum()
    return float(2 * tp / denom) if denom else 0.0


METRICS: dict[str, Callable] = {"auroc": auroc, "auprc": auprc}


def bootstrap_ci(scores, labels, metric: Callable | str = auroc, n_boot: int = 1000, seed: int = 0,
                 level: float = 0.95, max_redraws: int = 100) -> tuple[float, float]:
    """Percentile bootstrap over samples.

    Resamples lacking one of the two classes are redrawn (up to
    ``max_redraws`` times each).
    """
    if isinstance(metric, str):
        metric = METRICS[metric]
    if n_boot < 100:
        raise ValueError("n_boot must be at least 100")
    s = np.asarray(scores)
    y = np.asarray(labels)
    n = len(y)
    if n == 0 or y.min() == y.max():
        raise UndefinedMetric("bootstrap needs both classes present")
    rng = np.random.default_rng(seed)
    values = np.empty(n_boot)
    for b in range(n_boot):
        for _ in range(max_redraws):
            idx = rng.integers(0, n, n)
            yb = y[idx]
            if yb.min() != yb.max():
                break
        else:
            raise UndefinedMetric("could not draw a resample containing both classes")
        values[b] = metric(s[idx], yb)
    tail = (1.0 - level) / 2.0 * 100.0
    lo, hi = np.percentile(values, [tail, 100.0 - tail])
    return float(lo), float(hi)


# probes ----------------------------------------------------------------------

@dataclass
class ProbeConfig:
    penalty: str = "l2"
    max_iterations: int = 10000
    class_weighting: str = "balanced"
    tolerance: float = 1e-4
    C: float = 1.0
    standardize: bool = True

    def __post_init__(self):
        if self.penalty.lower() != "l2":
            raise ValueError("only the L2 penalty is supported")
        if self.class_weighting not in ("balanced", "none"):
            raise ValueError("class_weighting must be 'balanced' or 'none'")


def balanced_class_weights(labels) -> dict[int, float]:
    """``n / (n_classes * n_c)`` for each class c present."""
    y = np.asarray(labels)
    classes, counts = np.unique(y, return_counts=True)
    return {int(c): len(y) / (len(classes) * n) for c, n in zip(classes, counts)}


@dataclass
class ProbeModel:
    classes: np.ndarray
    model: LogisticRegression
    scaler: StandardScaler | None
    converged: bool
    n_iter: int

    def _x(self, x):
        x = np.asarray(x, dtype=np.float64)
        return self.scaler.transform(x) if self.scaler is not None else x

    def predict_proba(self, x) -> np.ndarray:
        return self.model.predict_proba(self._x(x))

    def scores(self, x, n_classes: int) -> np.ndarray:
        """Class probabilities laid out over ``range(n_classes)``; unseen classes score 0."""
        out = np.zeros((len(x), n_classes))
        out[:, self.classes] = self.predict_proba(x)
        return out

    def predict(self, x) -> np.ndarray:
        return self.classes[self.predict_proba(x).argmax(axis=1)]


def fit_probe(embeddings, labels, cfg: ProbeConfig | None = None) -> ProbeModel:
    """Logistic regression (multinomial when >2 classes) on frozen embeddings."""
    cfg = cfg or ProbeConfig()
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError(f"probe needs at least two classes, got {classes.tolist()}")
    scaler = StandardScaler().fit(x) if cfg.standardize else None
    if scaler is not None:
        x = scaler.transform(x)
    weights = balanced_class_weights(y) if cfg.class_weighting == "balanced" else None
    clf = LogisticRegression(C=cfg.C, max_iter=cfg.max_iterations, tol=cfg.tolerance,
                             class_weight=weights, solver="lbfgs")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConvergenceWarning)
        clf.fit(x, y)
    converged = not any(issubclass(w.category, ConvergenceWarning) for w in caught)
    if not converged:
        log.warning("probe hit max_iter=%d without converging", cfg.max_iterations)
    return ProbeModel(classes, clf, scaler, converged, int(np.max(clf.n_iter_)))


# reports ---------------------------------------------------------------------

@dataclass
class ClassMetrics:
    name: str
    prevalence: float
    n: int
    values: dict = field(default_factory=dict)  # metric -> (point, lo, hi)


@dataclass
class MetricsReport:
    task: str
    source: str
    stratum: str
    n_samples: int
    classes: list = field(default_factory=list)
    macro: dict = field(default_factory=dict)
    undefined: bool = False

    def metric(self, name: str, cls: str | None = None) -> float:
        if cls is None:
            return self.macro.get(name, math.nan)
        for c in self.classes:
            if c.name == cls:
                return c.values[name][0]
        raise KeyError(cls)

    def rows(self):
        for c in self.classes:
            for m, (point, lo, hi) in c.values.items():
                yield dict(task=self.task, source=self.source, stratum=self.stratum, cls=c.name,
                           metric=m, point=point, ci_low=lo, ci_high=hi, n=c.n, prevalence=c.prevalence)
        if len(self.classes) > 1:
            for m, v in self.macro.items():
                yield dict(task=self.task, source=self.source, stratum=self.stratum, cls="macro",
                           metric=m, point=v, ci_low=math.nan, ci_high=math.nan, n=self.n_samples,
                           prevalence=math.nan)


REPORT_COLUMNS = ("task", "source", "stratum", "class", "metric", "point", "ci_low", "ci_high", "n", "prevalence")


def write_reports(reports: Sequence[MetricsReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for rep in reports:
            for r in rep.rows():
                w.writerow([r["task"], r["source"], r["stratum"], r["cls"], r["metric"],
                            f"{r['point']:.6g}", f"{r['ci_low']:.6g}", f"{r['ci_high']:.6g}",
                            r["n"], f"{r['prevalence']:.6g}"])


def score_predictions(task: str, probs: np.ndarray, labels: np.ndarray, *, source="fused", stratum="all",
                      n_boot: int = 1000, seed: int = 0, with_f1: bool = False) -> MetricsReport:
    """Per-class (one-vs-rest) and macro metrics for a matrix of class scores."""
    _, names, binary = TASKS[task]
    labels = np.asarray(labels)
    rep = MetricsReport(task, source, stratum, len(labels))
    targets = [1] if binary else range(len(names))
    pred = probs.argmax(axis=1)
    for c in targets:
        y = (labels == c).astype(int)
        entry = ClassMetrics(names[c], float(y.mean()) if len(y) else math.nan, len(y))
        metrics = dict(METRICS)
        for mname, fn in metrics.items():
            try:
                point = fn(probs[:, c], y)
                lo, hi = bootstrap_ci(probs[:, c], y, fn, n_boot, seed) if n_boot else (math.nan, math.nan)
            except UndefinedMetric:
                point = lo = hi = math.nan
            entry.values[mname] = (point, lo, hi)
        if with_f1:
            pc = (pred == c).astype(int)
            point = f1_score(pc, y)
            try:
                lo, hi = bootstrap_ci(pc, y, f1_score, n_boot, seed) if n_boot else (math.nan, math.nan)
            except UndefinedMetric:
                lo = hi = math.nan
            entry.values["f1"] = (point, lo, hi)
        rep.classes.append(entry)
    for m in rep.classes[0].values if rep.classes else ():
        vals = [c.values[m][0] for c in rep.classes if not math.isnan(c.values[m][0])]
        rep.macro[m] = float(np.mean(vals)) if vals else math.nan
    rep.undefined = all(math.isnan(v) for v in rep.macro.values())
    return rep


def _task_rows(embset: EmbeddingSet, task: str):
    field_name = TASKS[task][0]
    if field_name not in embset.labels:
        raise KeyError(f"embeddings carry no {field_name} labels")
    return embset.labels[field_name]


def evaluate_task(embset: EmbeddingSet, task: str, strata: str | None = None, source: str = "fused",
                  cfg: ProbeConfig | None = None, n_boot: int = 1000, seed: int = 0,
                  train_split: str = "train", test_split: str = "test",
                  with_f1: bool = False) -> list[MetricsReport]:
    """Fit a probe on the training split and score it on the test split.

    With ``strata`` ('age' or 'sex') one report per stratum is returned, each
    computed only from the test clips in that stratum.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {list(TASKS)}")
    labels = _task_rows(embset, task)
    x = embset.features(source)
    train = (embset.split == train_split) & (labels >= 0)
    test = (embset.split == test_split) & (labels >= 0)
    probe = fit_probe(x[train], labels[train], cfg)
    n_classes = len(TASKS[task][1])
    probs = probe.scores(x[test], n_classes)
    y = labels[test]
    strat_field = STRATA.get(strata or "none", strata)
    if strat_field is None:
        return [score_predictions(task, probs, y, source=source, n_boot=n_boot, seed=seed, with_f1=with_f1)]
    groups = embset.labels[strat_field][test]
    reports = []
    for g, gname in enumerate(STRATUM_NAMES[strat_field]):
        m = groups == g
        rep = score_predictions(task, probs[m], y[m], source=source, stratum=f"{strata}={gname}",
                                n_boot=n_boot, seed=seed, with_f1=with_f1)
        if rep.undefined:
            log.warning("%s: stratum %s has a single class; reported as undefined", task, gname)
        reports.append(rep)
    return reports


# few-shot --------------------------------------------------------------------

@dataclass
class FewShotPoint:
    k: int
    replicate: int
    participants: tuple
    auroc: float
    auprc: float


@dataclass
class FewShotCurve:
    task: str
    source: str
    points: list

    def mean(self, metric: str = "auroc") -> dict:
        out = {}
        for k in dict.fromkeys(p.k for p in self.points):
            vals = [getattr(p, metric) for p in self.points if p.k == k and not math.isnan(getattr(p, metric))]
            out[k] = float(np.mean(vals)) if vals else math.nan
        return out

    def rows(self):
        auroc_m, auprc_m = self.mean("auroc"), self.mean("auprc")
        for k in auroc_m:
            yield dict(task=self.task, source=self.source, k=k, auroc=auroc_m[k], auprc=auprc_m[k],
                       replicates=sum(p.k == k for p in self.points))


def few_shot_curve(embset_train: EmbeddingSet, embset_test: EmbeddingSet, k_values=FEW_SHOT_K,
                   task: str = "stage5", replicates: int = 3, seed: int = 0, source: str = "fused",
                   cfg: ProbeConfig | None = None, max_redraws: int = 20) -> FewShotCurve:
    """Probe performance as a function of how many training participants are seen.

    For each k, k participants are drawn (with all their clips), a probe is
    fit, and macro AUROC/AUPRC on the full test set are recorded per
    replicate. ``"all"`` (or None) means every training participant.
    """
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    field_name, names, binary = TASKS[task]
    y_train = embset_train.labels[field_name]
    x_train = embset_train.features(source)
    participants = np.array(sorted(set(embset_train.participant_ids[y_train >= 0].astype(str))))
    test_mask = embset_test.labels[field_name] >= 0
    x_test = embset_test.features(source)[test_mask]
    y_test = embset_test.labels[field_name][test_mask]
    ks = [len(participants) if k in ("all", None) else int(k) for k in k_values]
    too_big = [k for k in ks if k > len(participants) or k < 1]
    if too_big:
        raise ValueError(f"k values {too_big} exceed the {len(participants)} available participants")
    pid = embset_train.participant_ids.astype(str)
    points = []
    for r in range(replicates):
        rng = np.random.default_rng([seed, r])
        for k in ks:
            result = (math.nan, math.nan)
            chosen = ()
            for _ in range(max_redraws if k < len(participants) else 1):
                chosen = tuple(sorted(rng.choice(participants, k, replace=False)))
                rows = np.isin(pid, chosen) & (y_train >= 0)
                if len(np.unique(y_train[rows])) < 2:
                    continue
                probe = fit_probe(x_train[rows], y_train[rows], cfg)
                rep = score_predictions(task, probe.scores(x_test, len(names)), y_test,
                                        source=source, n_boot=0)
                result = (rep.macro["auroc"], rep.macro["auprc"])
                break
            points.append(FewShotPoint(k, r, chosen, *result))
    return FewShotCurve(task, source, points)


def write_curve(curves: Sequence[FewShotCurve], path, variant: str = "") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "task", "source", "k", "auroc", "auprc", "replicates"])
        for c in curves:
            for r in c.rows():
                w.writerow([variant, r["task"], r["source"], r["k"], f"{r['auroc']:.6g}",
                            f"{r['auprc']:.6g}", r["replicates"]])
