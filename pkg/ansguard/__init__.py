"""ansguard: layer-sensitivity guided adversarial example detection."""

__version__ = "0.1.0"

DEFAULT_SEED = 42
