"""Boosted-tree surrogate regressions and the attribution consistency scan.

Outcomes are regressed on (treatment slots + covariates) with unregularized
gradient-boosted trees of varying leaf caps; a planted bit counts as
consistently explained only when the treatment column dominates permutation
importance at every competitive complexity level.
"""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass, field

import numpy as np

from .signal import ConfigError, DataError

_MIN_GAIN = 1e-12
_MIN_ROWS = 50


@dataclass(frozen=True)
class SurrogateConfig:
    max_leaves_grid: tuple[int, ...] = (2, 3, 5, 8, 13, 21, 34)
    n_trees_max: int = 500
    learning_rate: float = 0.1
    patience: int = 20
    validation_fraction: float = 0.10
    permutation_repeats: int = 10
    seed: int = 20230521
    n_bins: int = 256

    def __post_init__(self):
        if any(l < 2 for l in self.max_leaves_grid):
            raise ConfigError("leaf caps must be >= 2")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction must be in (0, 1)")
        if self.learning_rate <= 0 or self.n_trees_max < 1 or self.patience < 1:
            raise ConfigError("learning_rate, n_trees_max and patience must be positive")


@dataclass
class _Tree:
    feature: np.ndarray  # -1 marks a leaf
    threshold: np.ndarray  # bin code; code <= threshold routes left
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray


def _node_hist(offset_codes, residual, rows, n_features, n_bins):
    # offset_codes holds code + feature_index * n_bins, so one flat bincount
    # accumulates all per-feature histograms at once
    flat = offset_codes[rows].ravel()
    cnt = np.bincount(flat, minlength=n_features * n_bins).astype(np.float64)
    sm = np.bincount(flat, weights=np.repeat(residual[rows], n_features),
                     minlength=n_features * n_bins)
    return cnt.reshape(n_features, n_bins), sm.reshape(n_features, n_bins)


def _best_split(cnt, sm):
    """Best variance-reduction split over all (feature, bin) cuts, or None."""
    n_total = float(cnt[0].sum())
    s_total = float(sm[0].sum())
    if n_total < 2:
        return None
    nl = np.cumsum(cnt, axis=1)[:, :-1]
    sl = np.cumsum(sm, axis=1)[:, :-1]
    nr = n_total - nl
    sr = s_total - sl
    ok = (nl > 0) & (nr > 0)
    nl_safe = np.where(ok, nl, 1.0)
    nr_safe = np.where(ok, nr, 1.0)
    gain = np.where(
        ok, sl**2 / nl_safe + sr**2 / nr_safe - s_total**2 / n_total, -np.inf
    )
    idx = int(np.argmax(gain))  # first maximum: lowest feature, then lowest bin
    best = float(gain.flat[idx])
    if not best > _MIN_GAIN:
        return None
    feat, cut = divmod(idx, gain.shape[1])
    return best, feat, cut


def _grow_tree(codes, offset_codes, residual, rows, max_leaves, n_bins):
    """Best-first growth: repeatedly split the open leaf with the largest
    variance reduction until the leaf cap is reached or no split helps."""
    n_features = codes.shape[1]
    feature = [-1]
    threshold = [0]
    left = [-1]
    right = [-1]
    value = [float(residual[rows].mean())]

    tie = itertools.count()
    heap = []
    hist = _node_hist(offset_codes, residual, rows, n_features, n_bins)
    split = _best_split(*hist)
    if split is not None:
        heapq.heappush(heap, (-split[0], next(tie), 0, rows, hist, split))

    n_leaves = 1
    while heap and n_leaves < max_leaves:
        _, _, node, node_rows, (cnt, sm), (gain, feat, cut) = heapq.heappop(heap)
        mask = codes[node_rows, feat] <= cut
        rows_l, rows_r = node_rows[mask], node_rows[~mask]
        children = []
        # histogram subtraction: build the smaller child, derive the sibling
        small, big = (rows_l, rows_r) if len(rows_l) <= len(rows_r) else (rows_r, rows_l)
        hist_small = _node_hist(offset_codes, residual, small, n_features, n_bins)
        hist_big = (cnt - hist_small[0], sm - hist_small[1])
        for child_rows, child_hist in (
            (rows_l, hist_small if small is rows_l else hist_big),
            (rows_r, hist_small if small is rows_r else hist_big),
        ):
            child_id = len(feature)
            feature.append(-1)
            threshold.append(0)
            left.append(-1)
            right.append(-1)
            value.append(float(residual[child_rows].mean()))
            children.append((child_id, child_rows, child_hist))
        feature[node] = feat
        threshold[node] = cut
        left[node] = children[0][0]
        right[node] = children[1][0]
        n_leaves += 1
        if n_leaves >= max_leaves:
            break
        for child_id, child_rows, child_hist in children:
            child_split = _best_split(*child_hist)
            if child_split is not None:
                heapq.heappush(
                    heap, (-child_split[0], next(tie), child_id, child_rows, child_hist, child_split)
                )
    return _Tree(
        np.asarray(feature, dtype=np.int32),
        np.asarray(threshold, dtype=np.int32),
        np.asarray(left, dtype=np.int32),
        np.asarray(right, dtype=np.int32),
        np.asarray(value, dtype=np.float64),
    )


def _apply_tree(tree: _Tree, codes) -> np.ndarray:
    out = np.empty(len(codes))
    stack = [(0, np.arange(len(codes)))]
    while stack:
        node, rows = stack.pop()
        feat = tree.feature[node]
        if feat < 0:
            out[rows] = tree.value[node]
        else:
            mask = codes[rows, feat] <= tree.threshold[node]
            stack.append((tree.left[node], rows[mask]))
            stack.append((tree.right[node], rows[~mask]))
    return out


@dataclass
class GBRTModel:
    base: float
    trees: list[_Tree]
    learning_rate: float
    bin_lo: np.ndarray
    bin_width: np.ndarray
    n_bins: int
    max_leaves: int
    val_mse: float
    best_iteration: int
    val_rows: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))
    improvements: list[tuple[int, float]] = field(default_factory=list)

    def bin(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        width = np.where(self.bin_width > 0, self.bin_width, 1.0)
        codes = np.floor((X - self.bin_lo) / width * self.n_bins)
        return np.clip(codes, 0, self.n_bins - 1).astype(np.int16)

    def predict_codes(self, codes) -> np.ndarray:
        pred = np.full(len(codes), self.base)
        for tree in self.trees:
            pred += self.learning_rate * _apply_tree(tree, codes)
        return pred

    def predict(self, X) -> np.ndarray:
        return self.predict_codes(self.bin(X))

    def used_features(self) -> set[int]:
        used: set[int] = set()
        for tree in self.trees:
            used.update(int(f) for f in tree.feature if f >= 0)
        return used


def _validation_split(n_rows, groups, fraction, rng):
    if groups is not None:
        groups = np.asarray(groups)
        unique = np.unique(groups)
        k = max(1, int(round(fraction * len(unique))))
        if k >= len(unique):
            raise DataError("validation fraction leaves no training groups")
        chosen = rng.choice(unique, size=k, replace=False)
        val_mask = np.isin(groups, chosen)
    else:
        k = max(1, int(round(fraction * n_rows)))
        perm = rng.permutation(n_rows)
        val_mask = np.zeros(n_rows, dtype=bool)
        val_mask[perm[:k]] = True
    if val_mask.all() or not val_mask.any():
        raise DataError("degenerate validation split")
    return np.flatnonzero(~val_mask), np.flatnonzero(val_mask)


def fit_gbrt(X, y, cfg: SurrogateConfig, max_leaves: int, groups=None) -> GBRTModel:
    """Fit a squared-error gradient-boosted ensemble of leaf-capped trees.

    No shrinkage penalties, no feature subsampling; complexity is governed by
    max_leaves alone. Training stops once validation MSE has not improved for
    cfg.patience rounds and the model is truncated to its best iteration.
    When groups is given (one id per row), the 10% validation sample is drawn
    by group so rows of one unit never straddle the split.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y):
        raise DataError("X must be (n, features) matching y")
    if len(X) < _MIN_ROWS:
        raise DataError(f"need at least {_MIN_ROWS} rows, got {len(X)}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise DataError("features and outcomes must be finite")
    if max_leaves < 2:
        raise ConfigError(f"max_leaves must be >= 2, got {max_leaves}")

    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    train_idx, val_idx = _validation_split(len(X), groups, cfg.validation_fraction, rng)

    bin_lo = X.min(axis=0)
    bin_width = X.max(axis=0) - bin_lo
    model = GBRTModel(
        base=float(y[train_idx].mean()),
        trees=[],
        learning_rate=cfg.learning_rate,
        bin_lo=bin_lo,
        bin_width=bin_width,
        n_bins=cfg.n_bins,
        max_leaves=max_leaves,
        val_mse=0.0,
        best_iteration=0,
        val_rows=val_idx,
    )
    codes = model.bin(X)

    pred = np.full(len(X), model.base)
    best_val = float(np.mean((y[val_idx] - pred[val_idx]) ** 2))
    model.val_mse = best_val
    model.improvements = [(0, best_val)]
    if np.ptp(y[train_idx]) == 0.0:
        return model  # constant target: predict the constant with zero trees

    offset_codes = codes.astype(np.int64)
    offset_codes += np.arange(codes.shape[1], dtype=np.int64)[None, :] * cfg.n_bins

    trees: list[_Tree] = []
    stale = 0
    for it in range(1, cfg.n_trees_max + 1):
        residual = y - pred
        tree = _grow_tree(codes, offset_codes, residual, train_idx, max_leaves, cfg.n_bins)
        trees.append(tree)
        pred += cfg.learning_rate * _apply_tree(tree, codes)
        val_mse = float(np.mean((y[val_idx] - pred[val_idx]) ** 2))
        if val_mse < best_val:
            best_val = val_mse
            model.best_iteration = it
            model.improvements.append((it, val_mse))
            stale = 0
        else:
            stale += 1
        if stale >= cfg.patience:
            break
    model.trees = trees[: model.best_iteration]
    model.val_mse = best_val
    return model


def permutation_importance(model: GBRTModel, X, y, cfg: SurrogateConfig) -> np.ndarray:
    """Per-feature importance: mean over seeded repeats of the MSE increase
    after permuting that feature's column. Features the ensemble never splits
    on score exactly zero; importances can be negative for noise features."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    codes = model.bin(X)
    # permuting feature j only changes trees that split on j, so cache each
    # tree's baseline output and re-apply just the affected trees
    tree_pred = (
        np.stack([_apply_tree(t, codes) for t in model.trees])
        if model.trees
        else np.empty((0, len(codes)))
    )
    base_pred = model.base + model.learning_rate * tree_pred.sum(axis=0)
    base_mse = float(np.mean((y - base_pred) ** 2))
    trees_using: dict[int, list[int]] = {}
    for idx, tree in enumerate(model.trees):
        for f in set(int(f) for f in tree.feature if f >= 0):
            trees_using.setdefault(f, []).append(idx)

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 1])))
    sums = np.zeros(X.shape[1])
    for _ in range(cfg.permutation_repeats):
        perm = rng.permutation(len(X))
        for j, tree_ids in sorted(trees_using.items()):
            saved = codes[:, j].copy()
            codes[:, j] = saved[perm]
            pred = base_pred.copy()
            for idx in tree_ids:
                pred += model.learning_rate * (_apply_tree(model.trees[idx], codes) - tree_pred[idx])
            codes[:, j] = saved
            sums[j] += float(np.mean((y - pred) ** 2)) - base_mse
    return sums / cfg.permutation_repeats


# ---------------------------------------------------------------------------
# Consistency scan
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScanEntry:
    stratum: int | None
    max_leaves: int
    val_mse: float
    treatment_rank: int
    top_feature: str
    qualifying: bool
    treatment_on_top: bool


@dataclass
class ConsistencyReport:
    bit: int
    observable: str
    entries: list[ScanEntry]
    consistent: bool
    skipped_strata: list[int]
    models: dict[tuple[int | None, int], GBRTModel]

    @property
    def verdict(self) -> str:
        return "CONSISTENT" if self.consistent else "NOT-CONSISTENT"


def _feature_name(j: int, n_bits: int) -> str:
    return f"t{j}" if j < n_bits else f"x{j - n_bits}"


def design_matrix(records, covariates, bit, observable, n_bits):
    """Rows [treatment slots | covariates] and outcomes for one bit's slice."""
    rows = []
    y = []
    groups = []
    for rec in records:
        if rec.bit != bit:
            continue
        value = getattr(rec, observable)
        if value is None:
            continue
        slot = np.zeros(n_bits)
        slot[bit] = rec.dose
        rows.append(np.concatenate([slot, covariates[rec.unit_id]]))
        y.append(float(value))
        groups.append(rec.unit_id)
    if not rows:
        return np.empty((0, n_bits + covariates.shape[1])), np.empty(0), np.empty(0, dtype=int)
    return np.asarray(rows), np.asarray(y), np.asarray(groups, dtype=int)


# Observables whose regressions are stratified by click count, matching how
# the interval statistics are analyzed elsewhere.
_STRATIFIED = ("mean_ici", "std_ici")


def consistency_scan(
    records,
    covariates,
    bit: int,
    observable: str,
    cfg: SurrogateConfig | None = None,
    n_bits: int | None = None,
) -> ConsistencyReport:
    """Scan model complexity for consistent attribution to the treatment bit.

    For each leaf cap in cfg.max_leaves_grid, fit the surrogate and compute
    permutation importances on the held-out validation rows. The bit is
    CONSISTENT for the observable iff the treatment column has the strictly
    largest importance at every cap whose validation MSE is within 10% of the
    best cap's. Interval observables are scanned per click-count stratum;
    strata with too few rows are skipped with a notice.
    """
    cfg = cfg or SurrogateConfig()
    if n_bits is None:
        n_bits = max((r.bit for r in records), default=bit) + 1
    covariates = np.asarray(covariates, dtype=np.float64)

    strata: list[int | None]
    if observable in _STRATIFIED:
        strata = sorted(
            {r.n_clicks for r in records if r.bit == bit and getattr(r, observable) is not None}
        )
    else:
        strata = [None]

    entries: list[ScanEntry] = []
    skipped: list[int] = []
    models: dict[tuple[int | None, int], GBRTModel] = {}
    verdicts: list[bool] = []
    for stratum in strata:
        if stratum is None:
            subset = records
        else:
            subset = [r for r in records if r.n_clicks == stratum]
        X, y, groups = design_matrix(subset, covariates, bit, observable, n_bits)
        if len(X) < _MIN_ROWS:
            if stratum is not None:
                skipped.append(stratum)
            continue
        per_cap = []
        for cap in cfg.max_leaves_grid:
            model = fit_gbrt(X, y, cfg, cap, groups=groups)
            models[(stratum, cap)] = model
            val_idx = model.val_rows
            imp = permutation_importance(model, X[val_idx], y[val_idx], cfg)
            others = np.delete(imp, bit)
            on_top = bool(imp[bit] > others.max()) if len(others) else True
            rank = 1 + int(np.sum(imp > imp[bit]))
            top_idx = int(np.argmax(imp))
            per_cap.append((cap, model.val_mse, rank, top_idx, on_top))
        best_mse = min(v for _, v, _, _, _ in per_cap)
        stratum_ok = True
        for cap, val_mse, rank, top_idx, on_top in per_cap:
            qualifying = val_mse <= 1.1 * best_mse
            if qualifying and not on_top:
                stratum_ok = False
            entries.append(
                ScanEntry(
                    stratum=stratum,
                    max_leaves=cap,
                    val_mse=val_mse,
                    treatment_rank=rank,
                    top_feature=_feature_name(top_idx, n_bits),
                    qualifying=qualifying,
                    treatment_on_top=on_top,
                )
            )
        verdicts.append(stratum_ok)

    return ConsistencyReport(
        bit=bit,
        observable=observable,
        entries=entries,
        consistent=bool(verdicts) and all(verdicts),
        skipped_strata=skipped,
        models=models,
    )


def outcome_curve(model: GBRTModel, X, dose_col: int) -> tuple[np.ndarray, np.ndarray]:
    """Mean model prediction grouped by the dose column's values."""
    X = np.asarray(X, dtype=np.float64)
    pred = model.predict(X)
    doses = np.unique(X[:, dose_col])
    means = np.array([pred[X[:, dose_col] == d].mean() for d in doses])
    return doses, means
