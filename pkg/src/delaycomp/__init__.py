"""Frame-delay compensation for teleoperated ground robots."""

from . import _runtime  # noqa: F401  (must precede numba users)

__version__ = "0.1.0"
