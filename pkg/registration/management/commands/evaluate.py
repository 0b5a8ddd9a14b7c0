from pathlib import Path

from django.core.management.base import CommandError

from registration.experiments import (
    compare_with_baseline, evaluate_pairs, read_baseline_csv, robustness_experiment,
    summarize_rows, write_evaluation_csv, write_robustness_csv,
)
from registration.posterior import SnapshotStore
from registration.volumes import SPLITS, load_dataset

from ._base import USAGE_ERROR, RegistrationCommand


class Command(RegistrationCommand):
    help = (
        "Evaluate a snapshot store on a dataset split: Dice before/after registration and fold "
        "percentage per pair, optionally against a baseline and under input corruption."
    )

    def add_arguments(self, parser):
        parser.add_argument('--store', required=True, help="Snapshot store directory.")
        parser.add_argument('--manifest', required=True, help="Dataset manifest.")
        parser.add_argument('--out', required=True, help="Evaluation CSV to write.")
        parser.add_argument('--split', choices=SPLITS, default='test', help="Dataset split to evaluate.")
        parser.add_argument('--baseline-csv', help="Evaluation CSV of a baseline method for a paired t-test.")
        parser.add_argument('--sigma', type=float, action='append', default=[],
                            help="Gaussian corruption std; repeatable.")
        parser.add_argument('--mix-alpha', type=float, action='append', default=[],
                            help="Mixed-structure corruption weight; repeatable.")
        parser.add_argument('--seed', type=int, default=0, help="Seed for corruption draws.")

    def run(self, store, manifest, out, split='test', baseline_csv=None, sigma=(), mix_alpha=(), seed=0, **options):
        snapshots = SnapshotStore.load(store)
        pairs = load_dataset(manifest, splits=(split,)).splits[split]
        if not pairs:
            raise CommandError(f"The {split} split of {manifest} is empty.", returncode=USAGE_ERROR)

        rows = evaluate_pairs(snapshots, pairs)
        if not rows:
            raise CommandError(f"No labelled pairs in the {split} split of {manifest}.", returncode=USAGE_ERROR)

        baseline = ttest = None
        if baseline_csv:
            baseline = read_baseline_csv(baseline_csv)
            ttest = compare_with_baseline(rows, baseline)
        path = write_evaluation_csv(out, rows, baseline=baseline, ttest=ttest)

        summary = summarize_rows(rows)['mean']
        self.stdout.write(self.style.SUCCESS(
            f"Evaluated {len(pairs)} pairs: dice {summary['dice_before']:.4f} -> {summary['dice_after']:.4f}, "
            f"folds {summary['fold_pct']:.4f}%; wrote {path}"
        ))
        if ttest is not None:
            self.stdout.write(f"Paired t-test against baseline: t = {ttest.statistic:.4f}, p = {ttest.pvalue:.3g}")

        robustness = []
        if sigma:
            robustness += robustness_experiment(snapshots, pairs, 'gaussian', sigma, seed=seed)
        if mix_alpha:
            robustness += robustness_experiment(snapshots, pairs, 'mixed', mix_alpha, seed=seed)
        if robustness:
            out = Path(out)
            robustness_path = write_robustness_csv(out.with_name(f'{out.stem}_robustness.csv'), robustness)
            for row in robustness:
                self.stdout.write(f"{row.corruption} {row.level:g}: dice {row.mean_dice:.4f} ± {row.std_dice:.4f}")
            self.stdout.write(self.style.SUCCESS(f"Wrote robustness results to {robustness_path}"))
