import logging

from django.core.management.base import BaseCommand, CommandError
from rest_framework import serializers

from registration.exceptions import DegenerateStatisticError, FormatError, NumericalError, ShapeError

logger = logging.getLogger(__name__)

USAGE_ERROR = 2
NUMERIC_ERROR = 3


def describe(detail) -> str:
    """Flatten a DRF error detail into one readable line."""
    if isinstance(detail, dict):
        return '; '.join(f"{key}: {describe(value)}" for key, value in detail.items())
    if isinstance(detail, (list, tuple)):
        return ', '.join(describe(item) for item in detail)
    return str(detail)


class RegistrationCommand(BaseCommand):
    """
    Base for the registration commands.

    Subclasses implement `run`. Configuration, shape, format and statistic
    errors exit with status 2, numerical failures with status 3.
    """

    def handle(self, *args, **options):
        try:
            return self.run(**options)
        except serializers.ValidationError as exc:
            raise CommandError(f"Invalid configuration: {describe(exc.detail)}", returncode=USAGE_ERROR) from exc
        except (ShapeError, FormatError, DegenerateStatisticError) as exc:
            raise CommandError(str(exc), returncode=USAGE_ERROR) from exc
        except NumericalError as exc:
            raise CommandError(
                f"Numerical failure at iteration {exc.iteration}: {exc}", returncode=NUMERIC_ERROR
            ) from exc

    def run(self, **options):
        raise NotImplementedError("Registration commands implement run()")
