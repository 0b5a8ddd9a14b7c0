from pathlib import Path

import numpy as np

from registration.posterior import SnapshotStore, register
from registration.volumes import read_volume, write_field, write_pgm, write_volume

from ._base import RegistrationCommand


class Command(RegistrationCommand):
    help = "Register a moving volume onto a fixed one and write the result with its uncertainty maps."

    def add_arguments(self, parser):
        parser.add_argument('--store', required=True, help="Snapshot store directory written by train.")
        parser.add_argument('--moving', required=True, help="Moving volume file.")
        parser.add_argument('--fixed', required=True, help="Fixed volume file.")
        parser.add_argument('--out', required=True, help="Output directory.")
        parser.add_argument('--preview', action='store_true', help="Also write PGM renders of the outputs.")

    def run(self, store, moving, fixed, out, preview=False, **options):
        snapshots = SnapshotStore.load(store)
        moving_image = read_volume(moving)
        fixed_image = read_volume(fixed)
        result = register(moving_image, fixed_image, snapshots)

        out = Path(out)
        outputs = {
            'registered': write_volume(out / 'registered.vol', result.registered, role='image'),
            'deformation': write_field(out / 'deformation.vol', result.deformation, role='deformation'),
            'variance': write_field(out / 'variance.vol', result.summary.variance, role='velocity_variance'),
            'uncertainty': write_field(out / 'uncertainty.vol', result.summary.uncertainty, role='velocity_uncertainty'),
            'deformation_uncertainty': write_field(
                out / 'deformation_uncertainty.vol', result.summary.deformation_uncertainty,
                role='deformation_uncertainty',
            ),
        }
        if preview:
            write_pgm(out / 'registered.pgm', result.registered)
            write_pgm(out / 'uncertainty.pgm', result.summary.uncertainty.mean(axis=0))

        if len(snapshots) == 1:
            self.stdout.write(self.style.WARNING(
                "The store holds a single snapshot: uncertainty maps sit at the floor value."
            ))
        mean_displacement = float(np.sqrt((result.deformation ** 2).sum(axis=0)).mean())
        self.stdout.write(self.style.SUCCESS(
            f"Registered with {len(snapshots)} snapshots; mean |u| = {mean_displacement:.4f} voxels; "
            f"wrote {', '.join(path.name for path in outputs.values())} to {out}"
        ))
