"""Semi-supervised remaining-useful-life estimation with self-supervised siamese pre-training."""
from importlib import resources
from pathlib import Path

__version__ = "0.1.0"


def fixture_dir() -> Path:
    """Directory of the bundled 5-engine synthetic corpus (subset name FD001)."""
    return Path(str(resources.files(__name__) / "fixtures"))
