"""Unified attribute ontology: class counts, prompt descriptions, label constants."""

from __future__ import annotations

MALE, FEMALE, UNKNOWN = 0, 1, 2
GENDER_CLASSES = 3
IGNORE_INDEX = -100

NEUTRAL_PROMPT = "the attribute is unclear"

# (attribute, class index) -> prompt description; index order defines the class id
ATTRIBUTE_CLASSES: dict[str, tuple[str, ...]] = {
    "hairstyle": (
        "a person with long blonde hair",
        "a person with short dark hair",
        "a person with a ginger ponytail",
        "a person with a shaved head",
    ),
    "upper": (
        "a person wearing a red jacket",
        "a person wearing a blue shirt",
        "a person wearing a green hoodie",
        "a person wearing a white coat",
    ),
    "lower": (
        "a person wearing a blue skirt",
        "a person wearing dark jeans",
        "a person wearing gray shorts",
        "a person wearing purple trousers",
    ),
    "feet": (
        "a person wearing high heels",
        "a person wearing white sneakers",
        "a person wearing brown boots",
    ),
    "accessories": (
        "a person carrying a tan handbag",
        "a person wearing a green backpack",
        "a person carrying no bag",
    ),
    "beard": (
        "a person with a beard",
        "a person with no beard",
    ),
    "moustache": (
        "a person with a moustache",
        "a person with no moustache",
    ),
}

FIVE_ATTRIBUTES = ("hairstyle", "upper", "lower", "feet", "accessories")
SEVEN_ATTRIBUTES = FIVE_ATTRIBUTES + ("beard", "moustache")

ATTRIBUTE_SETS = {"five": FIVE_ATTRIBUTES, "seven": SEVEN_ATTRIBUTES}


def attribute_spec(set_name: str) -> tuple[tuple[str, int], ...]:
    """(name, class count) pairs for a named attribute set."""
    names = ATTRIBUTE_SETS[set_name]
    return tuple((a, len(ATTRIBUTE_CLASSES[a])) for a in names)


def default_prompt_rows() -> list[tuple[str, int, str]]:
    rows = []
    for attr, classes in ATTRIBUTE_CLASSES.items():
        for idx, desc in enumerate(classes):
            rows.append((attr, idx, desc))
    return rows
