"""Lesion classes and CT phases shared across the package."""

PHASES = ("NC", "A", "V", "D")
REQUIRED_PHASES = ("NC", "A", "V")

CLASS_NAMES = ("HCC", "ICC", "meta", "heman", "FNH", "cyst", "calc", "others")
NUM_CLASSES = len(CLASS_NAMES)
NO_OBJECT = NUM_CLASSES  # index of the extra "no lesion" class in the query head
BACKGROUND = NUM_CLASSES  # index of the background channel in semantic maps

OTHERS = CLASS_NAMES.index("others")
MALIGNANT = tuple(CLASS_NAMES.index(n) for n in ("HCC", "ICC", "meta"))
BENIGN = tuple(CLASS_NAMES.index(n) for n in ("heman", "FNH", "cyst", "calc"))


def class_index(name):
    try:
        return CLASS_NAMES.index(name)
    except ValueError:
        raise KeyError(f"unknown lesion class {name!r}") from None
