"""Liver tumor diagnosis on multi-phase CT with iterative phase fusion and a mask transformer."""

from liverdx.labels import BENIGN, CLASS_NAMES, MALIGNANT, NUM_CLASSES, OTHERS, PHASES

__version__ = "0.1.0"

__all__ = ["BENIGN", "CLASS_NAMES", "MALIGNANT", "NUM_CLASSES", "OTHERS", "PHASES", "__version__"]
