"""Label schemas for the 6-, 7- and 10-label cardiac segmentations.

IDs are contiguous from 1 in the order listed; 0 is background in every
variant.  Coarsening between variants goes through :meth:`LabelSchema.merge_to`.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Variant",
    "LabelSchema",
    "SIX",
    "SIX_NO_PA_REFINED",
    "SEVEN",
    "TEN",
    "LA_SUBLABELS",
    "get_schema",
]


class Variant(str, enum.Enum):
    SIX = "SIX"
    SIX_NO_PA_REFINED = "SIX_NO_PA_REFINED"
    SEVEN = "SEVEN"
    TEN = "TEN"


LA_SUBLABELS = ("LAbody", "LPV", "RPV", "LAA")

# finer name -> coarser name, consulted only when the coarse schema lacks the name
_COARSENING = {
    "LAbody": "LA",
    "LPV": "LA",
    "RPV": "LA",
    "LAA": "LA",
    "PA": "RV",
}


@dataclass(frozen=True)
class LabelSchema:
    variant: Variant
    names: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ValueError(f"duplicate label names in {self.names}")

    @property
    def n_labels(self) -> int:
        return len(self.names)

    @property
    def n_channels(self) -> int:
        """Channels of a one-hot encoding: background plus every label."""
        return len(self.names) + 1

    @property
    def ids(self) -> tuple[int, ...]:
        return tuple(range(1, len(self.names) + 1))

    def id_of(self, name: str) -> int:
        try:
            return self.names.index(name) + 1
        except ValueError:
            raise KeyError(f"label {name!r} not in schema {self.variant.value}") from None

    def name_of(self, label_id: int) -> str:
        if not 1 <= label_id <= len(self.names):
            raise KeyError(f"label id {label_id} not in schema {self.variant.value}")
        return self.names[label_id - 1]

    def __contains__(self, name: str) -> bool:
        return name in self.names

    def entries(self) -> list[tuple[int, str]]:
        return list(zip(self.ids, self.names))

    def validate(self, data: np.ndarray) -> None:
        """Raise ValueError if ``data`` holds an ID this schema does not declare."""
        if data.size == 0:
            return
        lo, hi = int(data.min()), int(data.max())
        if lo < 0 or hi > len(self.names):
            bad = np.unique(data[(data < 0) | (data > len(self.names))])
            raise ValueError(
                f"label IDs {bad.tolist()} not declared by schema {self.variant.value}"
            )

    def merge_lut(self, coarse: LabelSchema) -> np.ndarray:
        """Lookup table mapping this schema's IDs onto ``coarse`` IDs."""
        lut = np.zeros(self.n_channels, dtype=np.uint8)
        for label_id, name in self.entries():
            target = name if name in coarse else _COARSENING.get(name)
            if target is None or target not in coarse:
                raise ValueError(
                    f"no merge of {name!r} from {self.variant.value} into {coarse.variant.value}"
                )
            lut[label_id] = coarse.id_of(target)
        return lut

    def merge_to(self, coarse: LabelSchema, data: np.ndarray) -> np.ndarray:
        return self.merge_lut(coarse)[data]


SIX = LabelSchema(Variant.SIX, ("LV", "LVMyo", "RV", "LA", "RA", "AA"))
SIX_NO_PA_REFINED = LabelSchema(Variant.SIX_NO_PA_REFINED, SIX.names)
SEVEN = LabelSchema(Variant.SEVEN, SIX.names + ("PA",))
TEN = LabelSchema(
    Variant.TEN,
    ("LV", "LVMyo", "RV", "RA", "AA", "PA") + LA_SUBLABELS,
)

_BY_VARIANT = {s.variant: s for s in (SIX, SIX_NO_PA_REFINED, SEVEN, TEN)}


def get_schema(variant: Variant | str) -> LabelSchema:
    return _BY_VARIANT[Variant(variant)]
