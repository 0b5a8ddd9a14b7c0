from django.conf import settings


def defaults(section=None):
    """
    Return the `REGISTRATION` settings block, or one section of it.

    Args:
        section (str | None): Optional key such as 'LOSS' or 'NOISE'.

    Returns:
        dict | Any: The requested settings value.
    """
    block = settings.REGISTRATION
    if section is None:
        return block
    return block[section]
