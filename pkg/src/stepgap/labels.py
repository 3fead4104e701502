"""Gap types and the repair action each one prescribes."""

from __future__ import annotations

from enum import Enum


class GapType(str, Enum):
    NO_GAP = "NoGap"
    CC = "CC"
    IE = "IE"
    MB = "MB"

    @property
    def is_gap(self) -> bool:
        return self is not GapType.NO_GAP

    @classmethod
    def parse(cls, value: "str | GapType") -> "GapType":
        if isinstance(value, GapType):
            return value
        aliases = {"no-gap": cls.NO_GAP, "no_gap": cls.NO_GAP, "nogap": cls.NO_GAP, "none": cls.NO_GAP}
        try:
            return cls(value)
        except ValueError:
            key = str(value).strip().lower()
            if key in aliases:
                return aliases[key]
            for member in cls:
                if member.value.lower() == key:
                    return member
            raise ValueError(f"unknown gap label: {value!r}") from None


GAP_TYPES = (GapType.CC, GapType.IE, GapType.MB)
ALL_LABELS = (GapType.NO_GAP, GapType.IE, GapType.CC, GapType.MB)


class RepairAction(str, Enum):
    NONE = "None"
    RETRACT = "Retract"
    RE_SEARCH = "ReSearch"
    BRIDGING_SEARCH = "BridgingSearch"


REPAIR_FOR = {
    GapType.NO_GAP: RepairAction.NONE,
    GapType.CC: RepairAction.RETRACT,
    GapType.IE: RepairAction.RE_SEARCH,
    GapType.MB: RepairAction.BRIDGING_SEARCH,
}
