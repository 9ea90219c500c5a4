"""tripletforge: synthesizes verified coding question-solution-test triplets."""

__version__ = "0.1.0"
