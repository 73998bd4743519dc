"""Training and evaluation.

Class-weighted binary cross-entropy under AMSGrad with the staged
learning-rate schedule, early stopping on validation loss with
best-weight restore, patient-grouped 5-fold cross-validation, and
rank-based AUROC / step-wise AUPRC with one-tailed paired t-tests for
the final report.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import models
from .cohort import FoldSplit, class_weights
from .embed import EmbeddingMatrix
from .errors import ConfigurationError, DataError
from .ndcore import AmsGrad, Tensor, backward, l2_penalty, no_grad


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    hcr_batch_size: int = 16
    cts_batch_size: int = 64
    lr: float = 1e-3
    lr_drop_epochs: tuple[int, ...] = (10, 50, 90)
    early_stop_patience: int = 10
    k: int = 5
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigurationError("need at least one epoch")
        if self.hcr_batch_size < 1 or self.cts_batch_size < 1:
            raise ConfigurationError("batch sizes must be >= 1")
        if list(self.lr_drop_epochs) != sorted(set(self.lr_drop_epochs)):
            raise ConfigurationError("lr schedule epochs must be strictly increasing")

    def batch_size(self, kind: str) -> int:
        return self.cts_batch_size if kind == models.CTS_RNN else self.hcr_batch_size


def lr_at_epoch(config: TrainConfig, epoch: int, kind: str) -> float:
    """Initial rate divided by 10 at each scheduled epoch; the schedule
    applies to the note models only, CTS-RNN trains at a constant rate."""
    if epoch < 1:
        raise ConfigurationError("epochs are 1-based")
    if kind == models.CTS_RNN:
        return config.lr
    drops = sum(1 for e in config.lr_drop_epochs if epoch >= e)
    return config.lr / (10.0 ** drops)


# -- loss -------------------------------------------------------------------------


BCE_EPS = 1e-12


def weighted_bce(
    probs: Tensor, labels: np.ndarray, w_pos: float, w_neg: float
) -> Tensor:
    """Mean of -[w_pos*y*ln(p) + w_neg*(1-y)*ln(1-p)] over the batch.

    Probabilities exactly 0 or 1 are clamped to [eps, 1-eps] first.
    """
    y = np.asarray(labels, dtype=np.float64)
    p = probs.clip(BCE_EPS, 1.0 - BCE_EPS)
    losses = -(w_pos * y * p.log() + w_neg * (1.0 - y) * (1.0 - p).log())
    return losses.mean()


# -- metrics -----------------------------------------------------------------------


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Probability that a random positive outscores a random negative,
    ties counted half (the rank-statistic formulation)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError("auroc undefined: only one class present")
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    wins = 0
    ties = 0
    negs_below = 0
    i = 0
    n = len(scores)
    while i < n:
        j = i
        while j < n and sorted_scores[j] == sorted_scores[i]:
            j += 1
        group_pos = int((sorted_labels[i:j] == 1).sum())
        group_neg = (j - i) - group_pos
        wins += group_pos * negs_below
        ties += group_pos * group_neg
        negs_below += group_neg
        i = j
    return (wins + 0.5 * ties) / (n_pos * n_neg)


def auprc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Average precision: sum of (R_n - R_{n-1}) * P_n over descending
    score thresholds, step-wise with no interpolation."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    if n_pos == 0:
        raise DataError("auprc undefined: no positive examples")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    total = 0.0
    prev_recall = 0.0
    tp = 0
    i = 0
    n = len(scores)
    while i < n:
        j = i
        while j < n and sorted_scores[j] == sorted_scores[i]:
            j += 1
        tp += int((sorted_labels[i:j] == 1).sum())
        precision = tp / j
        recall = tp / n_pos
        total += (recall - prev_recall) * precision
        prev_recall = recall
        i = j
    return total


# -- Student t machinery --------------------------------------------------------------


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the regularized incomplete beta (modified
    Lentz), iterated to ~1e-15 machine convergence."""
    tiny = 1e-300
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def reg_inc_beta(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    front = math.exp(
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log(1.0 - x)
    )
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf(t: float, df: float) -> float:
    """Upper-tail probability of Student's t."""
    if df <= 0:
        raise ConfigurationError("degrees of freedom must be positive")
    x = df / (df + t * t)
    tail = 0.5 * reg_inc_beta(df / 2.0, 0.5, x)
    return tail if t >= 0 else 1.0 - tail


def paired_ttest_onetailed(a: Sequence[float], b: Sequence[float]) -> float:
    """p-value for the alternative mean(b - a) > 0, df = k - 1.

    Zero-variance differences use the documented convention: p = 0 when
    the mean difference is positive, 1 when negative, 0.5 when zero.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ConfigurationError("paired t-test needs two equal vectors, k >= 2")
    d = b - a
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0:
        return 0.0 if mean > 0 else (1.0 if mean < 0 else 0.5)
    t = mean / (sd / math.sqrt(len(d)))
    return t_sf(t, len(d) - 1)


def significance_marker(p: float) -> str:
    """Table markers: ** below 0.01, * below 0.05, dagger otherwise."""
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return "†"


# -- datasets -----------------------------------------------------------------------


@dataclass
class StayData:
    """Model-ready arrays for one hospital stay."""

    hadm_id: int
    label: bool
    note_ids: np.ndarray | None = None  # [T, L] int32
    note_masks: np.ndarray | None = None  # [T, L] bool
    ts_values: np.ndarray | None = None  # [W, F]
    ts_mask: np.ndarray | None = None  # [W, F] bool


def fold_class_weights(
    dataset: Mapping[int, StayData], roles: Mapping[int, str]
) -> tuple[float, float]:
    """Weights from the training-fold labels only."""
    train_labels = [dataset[h].label for h in sorted(roles) if roles[h] == "train"]
    return class_weights(train_labels)


def _require_modalities(kind: str, stay: StayData) -> None:
    if kind in (models.NOTES_HCR, models.MM_HCR) and stay.note_ids is None:
        raise DataError(f"hadm {stay.hadm_id}: notes required for {kind}")
    if kind in (models.CTS_RNN, models.MM_HCR) and stay.ts_values is None:
        raise DataError(f"hadm {stay.hadm_id}: time series required for {kind}")


def make_batches(
    kind: str,
    hadm_ids: Sequence[int],
    dataset: Mapping[int, StayData],
    batch_size: int,
    rng: np.random.Generator | None = None,
) -> list[list[int]]:
    """Batches of stays; note models bucket stays by note count so each
    batch stacks rectangular [B, T, L] arrays. Pass an rng to shuffle."""
    hadm_ids = sorted(hadm_ids)
    if kind == models.CTS_RNN:
        ids = np.array(hadm_ids)
        if rng is not None:
            ids = ids[rng.permutation(len(ids))]
        return [ids[i : i + batch_size].tolist() for i in range(0, len(ids), batch_size)]
    buckets: dict[int, list[int]] = {}
    for h in hadm_ids:
        stay = dataset[h]
        _require_modalities(kind, stay)
        buckets.setdefault(stay.note_ids.shape[0], []).append(h)
    batches = []
    for t in sorted(buckets):
        members = np.array(buckets[t])
        if rng is not None:
            members = members[rng.permutation(len(members))]
        batches.extend(
            members[i : i + batch_size].tolist()
            for i in range(0, len(members), batch_size)
        )
    if rng is not None:
        order = rng.permutation(len(batches))
        batches = [batches[i] for i in order]
    return batches


def batch_forward(
    kind: str,
    batch: Sequence[int],
    dataset: Mapping[int, StayData],
    params,
    model_cfg: models.ModelConfig,
    embeddings: EmbeddingMatrix | None,
    *,
    training: bool,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Probabilities [B] for one batch of stays."""
    stays = [dataset[h] for h in batch]
    for stay in stays:
        _require_modalities(kind, stay)
    if kind == models.NOTES_HCR:
        ids = np.stack([s.note_ids for s in stays])
        masks = np.stack([s.note_masks for s in stays])
        return models.notes_hcr_batch_forward(
            ids, masks, embeddings, params, model_cfg, training=training, rng=rng
        )
    if kind == models.CTS_RNN:
        values = np.stack([s.ts_values for s in stays])
        obs = np.stack([s.ts_mask for s in stays])
        _, probs = models.cts_rnn_batch_forward(
            values, obs, params, model_cfg, training=training, rng=rng
        )
        return probs
    if kind == models.MM_HCR:
        ids = np.stack([s.note_ids for s in stays])
        masks = np.stack([s.note_masks for s in stays])
        values = np.stack([s.ts_values for s in stays])
        obs = np.stack([s.ts_mask for s in stays])
        return models.mm_hcr_batch_forward(
            ids, masks, values, obs, embeddings, params, model_cfg,
            training=training, rng=rng,
        )
    raise ConfigurationError(f"unknown model kind {kind!r}")


def predict_scores(
    kind: str,
    hadm_ids: Sequence[int],
    dataset: Mapping[int, StayData],
    params,
    model_cfg: models.ModelConfig,
    embeddings: EmbeddingMatrix | None,
    batch_size: int = 64,
) -> dict[int, float]:
    """Eval-mode probabilities, deterministic, no tape."""
    out: dict[int, float] = {}
    with no_grad():
        for batch in make_batches(kind, hadm_ids, dataset, batch_size):
            probs = batch_forward(
                kind, batch, dataset, params, model_cfg, embeddings, training=False
            )
            for h, p in zip(batch, probs.data):
                out[h] = float(p)
    return out


# -- the training loop ---------------------------------------------------------------


@dataclass
class FoldResult:
    fold: int
    best_epoch: int
    best_val_loss: float
    history: list[dict] = field(default_factory=list)
    entries: dict[str, np.ndarray] = field(default_factory=dict)
    val_scores: dict[int, float] = field(default_factory=dict)
    test_scores: dict[int, float] = field(default_factory=dict)

    def metric_inputs(self, dataset: Mapping[int, StayData], split: str):
        scores = self.test_scores if split == "test" else self.val_scores
        ids = sorted(scores)
        return [scores[h] for h in ids], [int(dataset[h].label) for h in ids]


def train_fold(
    kind: str,
    fold_split: FoldSplit,
    dataset: Mapping[int, StayData],
    model_cfg: models.ModelConfig,
    train_cfg: TrainConfig,
    embeddings: EmbeddingMatrix | None = None,
) -> FoldResult:
    """Train one fold to the early-stopping point and score val/test.

    Up to `epochs` passes; each epoch records train/val loss and the
    learning rate; training stops once the validation loss has not
    improved for `early_stop_patience` epochs, and the best-epoch
    weights (including batchnorm running statistics) are restored.
    """
    train_cfg.validate()
    roles = fold_split.roles
    train_ids = sorted(h for h, r in roles.items() if r == "train")
    val_ids = sorted(h for h, r in roles.items() if r == "val")
    test_ids = sorted(h for h, r in roles.items() if r == "test")
    if not train_ids or not val_ids or not test_ids:
        raise DataError(f"fold {fold_split.fold}: some role is empty")
    w_neg, w_pos = fold_class_weights(dataset, roles)

    seed_seq = np.random.SeedSequence((train_cfg.seed, fold_split.fold))
    init_seed, loop_seed = seed_seq.spawn(2)
    rng = np.random.default_rng(loop_seed)
    params = models.init_model(
        kind, model_cfg, seed=int(init_seed.generate_state(1)[0]), embeddings=embeddings
    )
    named = models.named_parameters(params)
    optimizer = AmsGrad(named, lr=train_cfg.lr)
    decay_groups: dict[float, list] = {}
    for weight, lam in models.decayed_weights(params, model_cfg):
        if lam > 0.0:
            decay_groups.setdefault(lam, []).append(weight)
    batch_size = train_cfg.batch_size(kind)

    result = FoldResult(fold=fold_split.fold, best_epoch=0, best_val_loss=math.inf)
    patience_left = train_cfg.early_stop_patience
    best_entries: dict[str, np.ndarray] | None = None

    for epoch in range(1, train_cfg.epochs + 1):
        lr = lr_at_epoch(train_cfg, epoch, kind)
        optimizer.lr = lr
        loss_sum = 0.0
        n_examples = 0
        for batch in make_batches(kind, train_ids, dataset, batch_size, rng=rng):
            labels = np.array([dataset[h].label for h in batch], dtype=np.float64)
            probs = batch_forward(
                kind, batch, dataset, params, model_cfg, embeddings,
                training=True, rng=rng,
            )
            loss = weighted_bce(probs, labels, w_pos, w_neg)
            for lam, weights in decay_groups.items():
                loss = loss + l2_penalty(weights, lam)
            optimizer.zero_grad()
            backward(loss, named.values())
            optimizer.step()
            loss_sum += float(loss.data) * len(batch)
            n_examples += len(batch)
        train_loss = loss_sum / max(n_examples, 1)
        val_loss = _split_loss(
            kind, val_ids, dataset, params, model_cfg, embeddings,
            w_pos, w_neg, batch_size,
        )
        result.history.append(
            {"epoch": epoch, "lr": lr, "train_loss": train_loss, "val_loss": val_loss}
        )
        if val_loss < result.best_val_loss:
            result.best_val_loss = val_loss
            result.best_epoch = epoch
            best_entries = {
                name: arr.copy() for name, arr in models.params_to_entries(params).items()
            }
            patience_left = train_cfg.early_stop_patience
        else:
            patience_left -= 1
            if patience_left <= 0:
                break

    params = models.load_params_from_entries(kind, model_cfg, best_entries)
    result.entries = best_entries
    result.val_scores = predict_scores(
        kind, val_ids, dataset, params, model_cfg, embeddings, batch_size
    )
    result.test_scores = predict_scores(
        kind, test_ids, dataset, params, model_cfg, embeddings, batch_size
    )
    return result


def _split_loss(
    kind, hadm_ids, dataset, params, model_cfg, embeddings, w_pos, w_neg, batch_size
) -> float:
    """Weighted BCE over a split in eval mode (no decay term)."""
    total = 0.0
    count = 0
    with no_grad():
        for batch in make_batches(kind, hadm_ids, dataset, batch_size):
            labels = np.array([dataset[h].label for h in batch], dtype=np.float64)
            probs = batch_forward(
                kind, batch, dataset, params, model_cfg, embeddings, training=False
            )
            total += float(weighted_bce(probs, labels, w_pos, w_neg).data) * len(batch)
            count += len(batch)
    return total / max(count, 1)


def _train_fold_job(args):
    return train_fold(*args)


def train(
    kind: str,
    folds: Sequence[FoldSplit],
    dataset: Mapping[int, StayData],
    model_cfg: models.ModelConfig,
    train_cfg: TrainConfig,
    embeddings: EmbeddingMatrix | None = None,
    jobs: int = 1,
) -> list[FoldResult]:
    """All folds, sequentially or in parallel processes. Per-fold seeds
    derive from (seed, fold), so results do not depend on `jobs`."""
    job_args = [
        (kind, fold, dataset, model_cfg, train_cfg, embeddings) for fold in folds
    ]
    if jobs <= 1 or len(folds) <= 1:
        return [_train_fold_job(a) for a in job_args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_train_fold_job, job_args))


# -- reporting --------------------------------------------------------------------------


@dataclass
class ModelWindowMetrics:
    model: str
    window: int
    auroc_folds: list[float]
    auprc_folds: list[float]

    def mean(self, metric: str) -> float:
        return float(np.mean(getattr(self, f"{metric}_folds")))

    def sd(self, metric: str) -> float:
        values = getattr(self, f"{metric}_folds")
        return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


@dataclass
class Comparison:
    """One-tailed test that `better` beats `baseline` on one column."""

    baseline: str
    better: str
    window: int
    metric: str
    p_value: float

    @property
    def marker(self) -> str:
        return significance_marker(self.p_value)


@dataclass
class MetricsReport:
    k: int
    cells: list[ModelWindowMetrics]
    comparisons: list[Comparison]

    def cell(self, model: str, window: int) -> ModelWindowMetrics:
        for c in self.cells:
            if c.model == model and c.window == window:
                return c
        raise KeyError((model, window))


MODEL_ORDER = [models.CTS_RNN, models.NOTES_HCR, models.MM_HCR]


def build_report(
    fold_metrics: Mapping[tuple[str, int], dict[str, list[float]]], k: int
) -> MetricsReport:
    """Assemble the per-fold metrics into the rendered-table shape.

    fold_metrics maps (model, window) to {"auroc": [...], "auprc": [...]}
    with exactly k per-fold values each; adjacent models in the
    single-modality -> multi-modal ordering are compared per column with
    one-tailed paired t-tests.
    """
    cells = []
    for (model, window), values in sorted(fold_metrics.items()):
        for metric in ("auroc", "auprc"):
            if len(values[metric]) != k:
                raise DataError(
                    f"{model} W={window}: expected {k} {metric} folds, "
                    f"got {len(values[metric])}"
                )
        cells.append(
            ModelWindowMetrics(model, window, values["auroc"], values["auprc"])
        )
    comparisons = []
    windows = sorted({c.window for c in cells})
    for window in windows:
        present = [m for m in MODEL_ORDER if any(
            c.model == m and c.window == window for c in cells
        )]
        for baseline, better in zip(present, present[1:]):
            for metric in ("auroc", "auprc"):
                base = next(
                    c for c in cells if c.model == baseline and c.window == window
                )
                top = next(
                    c for c in cells if c.model == better and c.window == window
                )
                p = paired_ttest_onetailed(
                    getattr(base, f"{metric}_folds"), getattr(top, f"{metric}_folds")
                )
                comparisons.append(Comparison(baseline, better, window, metric, p))
    return MetricsReport(k=k, cells=cells, comparisons=comparisons)


def render_report(report: MetricsReport) -> str:
    """Aligned text table: model rows, W x {AUROC, AUPRC} columns, with
    mean +/- sd cells and significance markers against the previous row."""
    windows = sorted({c.window for c in report.cells})
    marker_of = {
        (c.better, c.window, c.metric): c.marker for c in report.comparisons
    }
    header = ["model"]
    for metric in ("AUROC", "AUPRC"):
        header.extend(f"{metric} W={w}" for w in windows)
    rows = [header]
    present_models = [
        m for m in MODEL_ORDER if any(c.model == m for c in report.cells)
    ]
    for model in present_models:
        row = [model]
        for metric in ("auroc", "auprc"):
            for window in windows:
                try:
                    cell = report.cell(model, window)
                except KeyError:
                    row.append("-")
                    continue
                mark = marker_of.get((model, window, metric), "")
                row.append(
                    f"{cell.mean(metric):.4f}±{cell.sd(metric):.4f}{mark}"
                )
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
             for row in rows]
    legend = (
        "significance vs previous row: ** p<0.01, * p<0.05, "
        "† not significant (p>=0.05)"
    )
    return "\n".join(lines + [legend])


def report_records(report: MetricsReport) -> list[str]:
    """Machine-readable line-delimited records for the report."""
    lines = []
    for c in report.cells:
        lines.append(json.dumps({
            "type": "cell",
            "model": c.model,
            "window": c.window,
            "auroc_folds": c.auroc_folds,
            "auroc_mean": c.mean("auroc"),
            "auroc_sd": c.sd("auroc"),
            "auprc_folds": c.auprc_folds,
            "auprc_mean": c.mean("auprc"),
            "auprc_sd": c.sd("auprc"),
        }, separators=(",", ":")))
    for cmp in report.comparisons:
        lines.append(json.dumps({
            "type": "comparison",
            "baseline": cmp.baseline,
            "better": cmp.better,
            "window": cmp.window,
            "metric": cmp.metric,
            "p_value": cmp.p_value,
            "marker": cmp.marker,
        }, separators=(",", ":")))
    return lines
