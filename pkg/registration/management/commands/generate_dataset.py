from pathlib import Path

from registration.experiments import split_dataset
from registration.synthetic import FAMILIES, SyntheticSpec, generate_pairs
from registration.volumes import save_pair, write_dataset_manifest

from ._base import RegistrationCommand


class Command(RegistrationCommand):
    help = "Generate synthetic registration pairs with ground-truth deformations and a dataset manifest."

    def add_arguments(self, parser):
        parser.add_argument('--out', required=True, help="Output directory.")
        parser.add_argument('--pairs', type=int, default=200, help="Number of pairs.")
        parser.add_argument('--shape', type=int, nargs='+', default=[64, 64], help="Grid size, 2 or 3 extents.")
        parser.add_argument('--family', choices=FAMILIES, default='blobs')
        parser.add_argument('--max-displacement', type=float, default=6.0, help="Largest displacement in voxels.")
        parser.add_argument('--seed', type=int, default=0)

    def run(self, out, pairs, shape, family, max_displacement, seed=0, **options):
        out = Path(out)
        spec = SyntheticSpec(shape=tuple(shape), family=family, max_displacement=max_displacement, seed=seed)
        generated = generate_pairs(pairs, spec)
        split = split_dataset(list(generated), seed=seed)

        entries = []
        for name, ids in split.items():
            for pair_id in ids:
                entries.append(save_pair(out, generated[pair_id], name))
        entries.sort(key=lambda entry: entry['id'])
        manifest = write_dataset_manifest(
            out / 'manifest.yaml', spec.shape, entries,
            metadata={'family': family, 'seed': seed, 'max_displacement': max_displacement},
        )
        self.stdout.write(self.style.SUCCESS(
            f"Wrote {len(entries)} pairs ({len(split['train'])} train, {len(split['val'])} val, "
            f"{len(split['test'])} test) to {manifest}"
        ))
