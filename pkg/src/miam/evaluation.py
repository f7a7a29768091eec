"""Ranking metrics and the k-fold cross-validation protocol.

AUC is the Mann-Whitney statistic P(score+ > score-) + 0.5 P(tie), computed
from average ranks in O(n log n). AUPRC is average precision: the step-wise
sum of precision at each positive, descending by score with ties grouped.
Fold aggregates report mean and population standard deviation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import List, Optional

import numpy as np

from .data import Dataset
from .errors import UndefinedMetricError


def _check_binary(labels: np.ndarray) -> np.ndarray:
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if not np.all((y == 0) | (y == 1)):
        raise UndefinedMetricError("labels must be binary 0/1")
    return y


def auc(scores, labels) -> float:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = _check_binary(labels)
    if s.shape != y.shape:
        raise UndefinedMetricError(f"{s.shape[0]} scores vs {y.shape[0]} labels")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes present")

    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s), dtype=np.float64)
    sorted_scores = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    rank_sum_pos = ranks[y == 1].sum()
    u = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = _check_binary(labels)
    if s.shape != y.shape:
        raise UndefinedMetricError(f"{s.shape[0]} scores vs {y.shape[0]} labels")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AUPRC needs at least one positive")

    order = np.argsort(-s, kind="mergesort")
    s_sorted = s[order]
    y_sorted = y[order]
    ap = 0.0
    tp = fp = 0
    prev_recall = 0.0
    i = 0
    while i < len(s_sorted):
        j = i
        while j + 1 < len(s_sorted) and s_sorted[j + 1] == s_sorted[i]:
            j += 1
        tp += int(y_sorted[i:j + 1].sum())
        fp += (j - i + 1) - int(y_sorted[i:j + 1].sum())
        recall = tp / n_pos
        precision = tp / (tp + fp)
        ap += (recall - prev_recall) * precision
        prev_recall = recall
        i = j + 1
    return float(ap)


@dataclass
class MetricsReport:
    fold_auc: List[float]
    fold_auprc: List[float]
    fold_sizes: List[int]
    config_fingerprint: str = ""
    notes: str = ("AUPRC estimator: average precision (ties grouped); "
                  "std: population std across folds")
    partial: bool = False
    failed_fold: Optional[int] = None

    @property
    def mean_auc(self) -> float:
        return float(np.mean(self.fold_auc))

    @property
    def std_auc(self) -> float:
        return float(np.std(self.fold_auc))

    @property
    def mean_auprc(self) -> float:
        return float(np.mean(self.fold_auprc))

    @property
    def std_auprc(self) -> float:
        return float(np.std(self.fold_auprc))

    def to_csv(self) -> str:
        lines = [f"# fingerprint={self.config_fingerprint}", f"# {self.notes}",
                 "fold,n,auc,auprc"]
        for i, (a, p, n) in enumerate(zip(self.fold_auc, self.fold_auprc, self.fold_sizes)):
            lines.append(f"{i},{n},{a!r},{p!r}")
        lines.append(f"mean,,{self.mean_auc!r},{self.mean_auprc!r}")
        lines.append(f"std,,{self.std_auc!r},{self.std_auprc!r}")
        return "\n".join(lines) + "\n"

    def format_table(self) -> str:
        rows = [f"{'fold':>6} {'n':>6} {'AUC':>8} {'AUPRC':>8}"]
        for i, (a, p, n) in enumerate(zip(self.fold_auc, self.fold_auprc, self.fold_sizes)):
            rows.append(f"{i:>6} {n:>6} {a:8.4f} {p:8.4f}")
        rows.append(f"{'all':>6} {sum(self.fold_sizes):>6} "
                    f"{self.mean_auc:.4f} ± {self.std_auc:.4f}  "
                    f"{self.mean_auprc:.4f} ± {self.std_auprc:.4f}")
        if self.partial:
            rows.append(f"PARTIAL REPORT: fold {self.failed_fold} failed")
        return "\n".join(rows) + "\n"


def cross_validate(dataset: Dataset, manifest, model_config, train_config,
                   normalize: bool = True, winsor_percentiles=(1.0, 99.0),
                   fingerprint: str = "") -> MetricsReport:
    """Train and score one model per fold; test folds stay unseen by both
    normalization fitting and model selection."""
    from . import autodiff as ad  # local imports break a module cycle
    from .ingest import apply_normalization, fit_normalization
    from .training import predict_probs, split_validation, train

    ids = [s.subject_id for s in dataset.samples]
    missing = [i for i in ids if i not in manifest.assignments]
    if missing:
        raise UndefinedMetricError(f"fold manifest missing {len(missing)} subjects, "
                                   f"first {missing[0]!r}")
    fold_of = np.array([manifest.assignments[i] for i in ids])

    fold_auc: List[float] = []
    fold_auprc: List[float] = []
    fold_sizes: List[int] = []
    for fold in range(manifest.k):
        test_idx = np.flatnonzero(fold_of == fold)
        train_idx = np.flatnonzero(fold_of != fold)
        train_full = dataset.subset(train_idx.tolist())
        test_set = dataset.subset(test_idx.tolist())

        if normalize:
            stats = fit_normalization(train_full, winsor_percentiles)
            train_full = apply_normalization(train_full, stats)
            test_set = apply_normalization(test_set, stats)

        fold_seed = int(np.random.SeedSequence([train_config.seed, fold]).generate_state(1)[0])
        fold_cfg = replace(train_config, seed=fold_seed)
        split_rng = np.random.default_rng(fold_seed)
        tr, val = split_validation(train_full, train_config.val_fraction, split_rng)

        result = train(tr, val, model_config, fold_cfg)
        if result.diverged:
            return MetricsReport(fold_auc, fold_auprc, fold_sizes,
                                 config_fingerprint=fingerprint,
                                 partial=True, failed_fold=fold)

        params = {k: ad.tensor(v) for k, v in result.best_params.items()}
        scores = predict_probs(test_set, params, model_config,
                               batch_size=train_config.batch_size,
                               dtype=train_config.dtype)
        labels = test_set.labels()
        fold_auc.append(auc(scores, labels))
        fold_auprc.append(auprc(scores, labels))
        fold_sizes.append(len(test_set))

    return MetricsReport(fold_auc, fold_auprc, fold_sizes, config_fingerprint=fingerprint)
