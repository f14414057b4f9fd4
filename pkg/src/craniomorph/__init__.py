"""Face/skull registration, joint shape models, and surgical outcome prediction."""

__version__ = "0.1.0"
