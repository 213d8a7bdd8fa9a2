"""Scheme enumeration and the common monitor parameters."""
from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass
from typing import Optional


class Scheme(str, enum.Enum):
    FIXER = "FIXER"
    HAFIX = "HAFIX"
    HCFI = "HCFI"
    HECFI = "HECFI"
    CET = "CET"
    EXCEC = "EXCEC"

    @classmethod
    def parse(cls, name: str) -> "Scheme":
        try:
            return cls(name.upper())
        except ValueError:
            raise ValueError(f"unknown scheme {name!r}; choose from "
                             f"{', '.join(s.value for s in cls)}") from None


ALL_SCHEMES = tuple(Scheme)


class EntryBits(str, enum.Enum):
    FULL32 = "Full32"
    BITS18TO1 = "Bits18to1"


@dataclass(frozen=True)
class MonitorConfig:
    """Dimensions of every monitor memory.

    Defaults are the common implementation parameters used for all six
    schemes.  ``shadow_entry_bits`` of None picks the scheme default
    (address bits [18:1] for EXCEC, full 32-bit addresses otherwise).
    ``recursion_counters`` switches the per-entry counters of EXCEC/HCFI
    on (bounded mode) or off (every call takes a fresh entry).
    """

    shadow_stack_size: int = 128
    recursion_depth: int = 128
    indirect_calls: int = 64
    indirect_jumps: int = 64
    indirectly_called: int = 64
    num_functions: int = 1024
    setjmp_calls: int = 8
    shadow_entry_bits: Optional[EntryBits] = None
    recursion_counters: bool = True
    decoder_tag_bits: int = 18

    def __post_init__(self):
        for k, v in asdict(self).items():
            if isinstance(v, int) and not isinstance(v, bool) and v <= 0:
                raise ValueError(f"{k} must be positive, got {v}")
        if self.shadow_entry_bits is not None:
            object.__setattr__(self, "shadow_entry_bits", EntryBits(self.shadow_entry_bits))

    @property
    def counter_bits(self) -> int:
        return max(1, math.ceil(math.log2(self.recursion_depth)))

    @property
    def function_label_bits(self) -> int:
        return max(1, math.ceil(math.log2(self.num_functions)))

    def entry_bits(self, scheme: Scheme) -> EntryBits:
        if self.shadow_entry_bits is not None:
            return self.shadow_entry_bits
        return EntryBits.BITS18TO1 if scheme is Scheme.EXCEC else EntryBits.FULL32
