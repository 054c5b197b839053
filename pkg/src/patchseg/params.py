"""Named learnable parameters with update-group routing tags.

Two groups exist: "core" (encoder, decoder, projector) and "backbone"
(per-layer adapters standing in for backbone fine-tuning).  Loss visibility
is derived from the group: core parameters are updated by both the
alignment and segmentation losses, backbone parameters by the segmentation
loss only.  The store enforces that pairing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .tensor import Tensor

GROUP_CORE = "core"
GROUP_BACKBONE = "backbone"

VISIBILITY = {GROUP_CORE: "align+seg", GROUP_BACKBONE: "seg-only"}


@dataclass
class Param:
    name: str
    value: np.ndarray
    group: str

    @property
    def visibility(self) -> str:
        return VISIBILITY[self.group]


@dataclass
class ParamStore:
    """Insertion-ordered mapping of parameter name to Param record."""

    entries: dict[str, Param] = field(default_factory=dict)

    def register(self, name: str, value: np.ndarray, group: str) -> None:
        if group not in VISIBILITY:
            raise ConfigError(f"parameter {name!r} has unknown group {group!r}")
        if name in self.entries:
            raise ConfigError(f"duplicate parameter name {name!r}")
        self.entries[name] = Param(
            name=name, value=np.array(value, dtype=np.float64), group=group
        )

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __getitem__(self, name: str) -> Param:
        return self.entries[name]

    def names(self) -> list[str]:
        return list(self.entries)

    def group_of(self, name: str) -> str:
        return self.entries[name].group

    def leaves(self) -> dict[str, Tensor]:
        """Fresh requires-grad tensors sharing no state with prior graphs."""
        return {
            name: Tensor(p.value, requires_grad=True)
            for name, p in self.entries.items()
        }

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.entries.values())

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.entries.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.entries) - set(state)
        if missing:
            raise ConfigError(f"state is missing parameters: {sorted(missing)[:3]}")
        for name, param in self.entries.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != param.value.shape:
                raise ConfigError(
                    f"parameter {name!r}: stored shape {value.shape} does not "
                    f"match model shape {param.value.shape}"
                )
            param.value = value.copy()
