"""
Dataset splitting, evaluation, statistics and the robustness / uncertainty experiments.
"""
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np
from scipy import stats

from .conf import defaults
from .exceptions import DegenerateStatisticError
from .metrics import dice, fold_percentage, pearson, warp_mask
from .posterior import SnapshotStore, register
from .synthetic import corrupt_gaussian, corrupt_mixed
from .volumes import ImagePair, SPLITS

logger = logging.getLogger(__name__)

CORRUPTIONS = ('gaussian', 'mixed')


def split_dataset(ids: Sequence[str], ratios: Optional[Sequence[float]] = None, seed: int = 0) -> Dict[str, List[str]]:
    """
    Shuffle ids under `seed` and cut them into train/val/test by `ratios`.

    Train and validation sizes are rounded; the test split takes the remainder.
    """
    ratios = tuple(ratios or defaults('SPLIT_RATIOS'))
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not np.isclose(sum(ratios), 1.0):
        raise ValueError(f"Split ratios must be three non-negative numbers summing to 1, got {ratios}.")
    ids = list(ids)
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n_train = int(round(ratios[0] * len(ids)))
    n_val = min(int(round(ratios[1] * len(ids))), len(ids) - n_train)
    return {
        'train': shuffled[:n_train],
        'val': shuffled[n_train:n_train + n_val],
        'test': shuffled[n_train + n_val:],
    }


class TTestResult(NamedTuple):
    statistic: float
    pvalue: float


def paired_ttest(x: Sequence[float], y: Sequence[float]) -> TTestResult:
    """
    Two-sided paired t-test of x against y.

    Raises:
        DegenerateStatisticError: For mismatched lengths or fewer than two pairs.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DegenerateStatisticError(f"Paired t-test needs series of equal length, got {x.shape} and {y.shape}.")
    if x.size < 2:
        raise DegenerateStatisticError("Paired t-test needs at least two pairs.")
    differences = x - y
    if np.all(differences == differences[0]):
        if differences[0] == 0:
            return TTestResult(0.0, 1.0)
        return TTestResult(float(np.copysign(np.inf, differences[0])), 0.0)
    result = stats.ttest_rel(x, y)
    return TTestResult(float(result.statistic), float(result.pvalue))


class EvaluationRow(NamedTuple):
    pair_id: str
    label_id: int
    dice_before: float
    dice_after: float
    fold_pct: float


def evaluate_pairs(store: SnapshotStore, pairs: Sequence[ImagePair], steps: Optional[int] = None) -> List[EvaluationRow]:
    """Dice before and after registration for every label of every pair, plus the fold percentage of Φ."""
    rows = []
    for pair in pairs:
        result = register(pair.moving, pair.fixed, store, steps, with_deformation_uncertainty=False)
        folds = fold_percentage(result.deformation)
        for label in pair.labels:
            rows.append(EvaluationRow(
                pair_id=pair.pair_id,
                label_id=label,
                dice_before=dice(pair.moving_masks[label], pair.fixed_masks[label]),
                dice_after=dice(warp_mask(pair.moving_masks[label], result.deformation), pair.fixed_masks[label]),
                fold_pct=folds,
            ))
        logger.info("Evaluated %s (fold %.4f%%)", pair.pair_id, folds)
    return rows


def summarize_rows(rows: Sequence[EvaluationRow]) -> Dict[str, Dict[str, float]]:
    columns = ('dice_before', 'dice_after', 'fold_pct')
    table = np.array([[getattr(row, c) for c in columns] for row in rows], dtype=np.float64)
    return {
        'mean': dict(zip(columns, table.mean(axis=0))),
        'std': dict(zip(columns, table.std(axis=0))),
    }


def read_baseline_csv(path) -> Dict[tuple, float]:
    """(pair_id, label_id) -> dice_after from a CSV written by `write_evaluation_csv`."""
    baseline = {}
    with Path(path).open(newline='', encoding='utf-8') as handle:
        for record in csv.DictReader(handle):
            if record.get('pair_id') in ('mean', 'std', 'ttest') or not record.get('label_id'):
                continue
            baseline[(record['pair_id'], int(record['label_id']))] = float(record['dice_after'])
    return baseline


def compare_with_baseline(rows: Sequence[EvaluationRow], baseline: Dict[tuple, float]) -> TTestResult:
    matched = [(row.dice_after, baseline[(row.pair_id, row.label_id)]) for row in rows
               if (row.pair_id, row.label_id) in baseline]
    if len(matched) < 2:
        raise DegenerateStatisticError(f"Only {len(matched)} rows match the baseline; a t-test needs two.")
    ours, theirs = zip(*matched)
    return paired_ttest(ours, theirs)


def write_evaluation_csv(path, rows: Sequence[EvaluationRow], baseline: Optional[Dict[tuple, float]] = None,
                         ttest: Optional[TTestResult] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = list(EvaluationRow._fields)
    if baseline is not None:
        header += ['baseline_dice_after', 'p_value']
    summary = summarize_rows(rows)
    with path.open('w', newline='', encoding='utf-8') as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        for row in rows:
            values = [row.pair_id, row.label_id, repr(row.dice_before), repr(row.dice_after), repr(row.fold_pct)]
            if baseline is not None:
                reference = baseline.get((row.pair_id, row.label_id))
                values += ['' if reference is None else repr(reference), '']
            writer.writerow(values)
        for name in ('mean', 'std'):
            values = [name, '', *(repr(float(summary[name][c])) for c in ('dice_before', 'dice_after', 'fold_pct'))]
            if baseline is not None:
                values += ['', '']
            writer.writerow(values)
        if ttest is not None:
            writer.writerow(['ttest', '', '', '', '', '', repr(ttest.pvalue)])
    return path


def select_pairs(pairs: Sequence[ImagePair], sample_size: Optional[int], seed: int) -> List[ImagePair]:
    pairs = list(pairs)
    if sample_size is None or sample_size >= len(pairs):
        return pairs
    chosen = np.sort(np.random.default_rng(seed).choice(len(pairs), size=sample_size, replace=False))
    return [pairs[i] for i in chosen]


@dataclass
class UncertaintyExperiment:
    sigmas: List[float]
    mean_uncertainty: List[float]
    scatter: List[tuple] = field(default_factory=list)
    r: Optional[float] = None
    degenerate: bool = False


def uncertainty_noise_experiment(store: SnapshotStore, pairs: Sequence[ImagePair], sigmas: Sequence[float],
                                 seed: int = 0, sample_size: Optional[int] = 8) -> UncertaintyExperiment:
    """
    Mean velocity uncertainty H̄ over all voxels and selected pairs, per Gaussian noise level.

    Both images of a pair are corrupted. If H̄ does not vary with σ (for example
    when all snapshots agree) the correlation is reported as degenerate.

    Raises:
        DegenerateStatisticError: If fewer than two noise levels are given.
    """
    sigmas = [float(s) for s in sigmas]
    if len(sigmas) < 2:
        raise DegenerateStatisticError("The uncertainty experiment needs at least two noise levels.")
    chosen = select_pairs(pairs, sample_size, seed)

    means, scatter = [], []
    for level, sigma in enumerate(sigmas):
        per_pair = []
        for index, pair in enumerate(chosen):
            moving = corrupt_gaussian(pair.moving, sigma, seed=seed + 2 * (level * len(chosen) + index))
            fixed = corrupt_gaussian(pair.fixed, sigma, seed=seed + 2 * (level * len(chosen) + index) + 1)
            result = register(moving, fixed, store, with_deformation_uncertainty=False)
            value = float(result.summary.uncertainty.mean())
            per_pair.append(value)
            scatter.append((sigma, pair.pair_id, value))
        means.append(float(np.mean(per_pair)))
        logger.info("sigma %.3f mean uncertainty %.6f", sigma, means[-1])

    experiment = UncertaintyExperiment(sigmas=sigmas, mean_uncertainty=means, scatter=scatter)
    if np.ptp(means) == 0:
        logger.warning("Mean uncertainty is identical at every noise level; correlation is degenerate.")
        experiment.degenerate = True
    else:
        experiment.r = pearson(sigmas, means)
    return experiment


def write_uncertainty_csv(path, experiment: UncertaintyExperiment) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', newline='', encoding='utf-8') as handle:
        writer = csv.writer(handle)
        writer.writerow(['sigma', 'mean_uncertainty'])
        for sigma, value in zip(experiment.sigmas, experiment.mean_uncertainty):
            writer.writerow([repr(sigma), repr(value)])
        writer.writerow(['pearson_r', '' if experiment.r is None else repr(experiment.r)])
    return path


def write_scatter_csv(path, experiment: UncertaintyExperiment) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', newline='', encoding='utf-8') as handle:
        writer = csv.writer(handle)
        writer.writerow(['sigma', 'pair_id', 'mean_uncertainty'])
        for sigma, pair_id, value in experiment.scatter:
            writer.writerow([repr(sigma), pair_id, repr(value)])
    return path


class RobustnessRow(NamedTuple):
    corruption: str
    level: float
    mean_dice: float
    std_dice: float


def robustness_experiment(store: SnapshotStore, pairs: Sequence[ImagePair], corruption: str,
                          levels: Sequence[float], seed: int = 0) -> List[RobustnessRow]:
    """
    Dice after registering corrupted inputs, per corruption level.

    'gaussian' levels are noise stds; 'mixed' levels are α, each pair being mixed
    with a partner drawn from the same set under `seed`.
    """
    if corruption not in CORRUPTIONS:
        raise ValueError(f"corruption must be one of {CORRUPTIONS}, got {corruption!r}.")
    pairs = list(pairs)
    rng = np.random.default_rng(seed)
    partners = []
    for index in range(len(pairs)):
        choices = [j for j in range(len(pairs)) if j != index] or [index]
        partners.append(choices[rng.integers(len(choices))])

    rows = []
    for level_index, level in enumerate(levels):
        scores = []
        for index, pair in enumerate(pairs):
            if corruption == 'gaussian':
                base = seed + 2 * (level_index * len(pairs) + index)
                moving = corrupt_gaussian(pair.moving, level, seed=base)
                fixed = corrupt_gaussian(pair.fixed, level, seed=base + 1)
            else:
                partner = pairs[partners[index]]
                moving = corrupt_mixed(pair.moving, partner.moving, level)
                fixed = corrupt_mixed(pair.fixed, partner.fixed, level)
            result = register(moving, fixed, store, with_deformation_uncertainty=False)
            per_label = [
                dice(warp_mask(pair.moving_masks[label], result.deformation), pair.fixed_masks[label])
                for label in pair.labels
            ]
            if per_label:
                scores.append(float(np.mean(per_label)))
        scores = np.asarray(scores, dtype=np.float64)
        rows.append(RobustnessRow(corruption, float(level), float(scores.mean()), float(scores.std())))
        logger.info("%s level %.3f mean dice %.4f", corruption, level, rows[-1].mean_dice)
    return rows


def write_robustness_csv(path, rows: Sequence[RobustnessRow]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', newline='', encoding='utf-8') as handle:
        writer = csv.writer(handle)
        writer.writerow(RobustnessRow._fields)
        for row in rows:
            writer.writerow([row.corruption, repr(row.level), repr(row.mean_dice), repr(row.std_dice)])
    return path


def split_pairs(pairs: Dict[str, ImagePair], split: Dict[str, List[str]]) -> Dict[str, List[ImagePair]]:
    return {name: [pairs[pair_id] for pair_id in split.get(name, [])] for name in SPLITS}
