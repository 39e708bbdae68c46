"""Shared vocabulary: categories, views, agents, methods, choice letters."""
from __future__ import annotations

from enum import Enum


class Category(str, Enum):
    POSE_ACTION = "PoseAction"
    OBJECT_ATTRIBUTE = "ObjectAttribute"
    NUMERICAL = "Numerical"
    SPATIAL = "Spatial"
    NA = "NA"


class View(str, Enum):
    EGO = "Ego"
    EXO = "Exo"
    BOTH = "Both"
    TEXT_ONLY = "TextOnly"
    NA = "NA"


class AgentId(str, Enum):
    F1_EGO_EXO = "F1_EgoExo"
    F2_EGO2EXO = "F2_Ego2Exo"
    F3_EXO2EGO = "F3_Exo2Ego"


class MethodId(str, Enum):
    DEFAULT = "Default"
    DDCOT = "DDCoT"
    COCOT = "CoCoT"
    CCOT = "CCoT"
    M3COT = "M3CoT"


class ChoiceLetter(str, Enum):
    """One of the four option letters. Unparsed answers are represented as None."""

    A = "A"
    B = "B"
    C = "C"
    D = "D"

    @property
    def index(self) -> int:
        return ord(self.value) - ord("A")

    @classmethod
    def from_index(cls, index: int) -> "ChoiceLetter":
        if not 0 <= index <= 3:
            raise ValueError(f"option index out of range: {index}")
        return cls(chr(ord("A") + index))

    @classmethod
    def from_letter(cls, letter: str) -> "ChoiceLetter":
        return cls(letter.upper())


# Display order used by every report surface.
CATEGORY_ORDER = (
    Category.POSE_ACTION,
    Category.OBJECT_ATTRIBUTE,
    Category.NUMERICAL,
    Category.SPATIAL,
)
PERSPECTIVE_ORDER = (View.EGO, View.EXO)

CATEGORY_LABELS = {
    Category.POSE_ACTION: "Pose & Action",
    Category.OBJECT_ATTRIBUTE: "Object & Attribute",
    Category.NUMERICAL: "Numerical",
    Category.SPATIAL: "Spatial",
}
