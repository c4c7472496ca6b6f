"""Arithmetic-primitive cost model for PWL activations, reported next to the
published FPGA resource numbers for tanh.

The model counts operations; it makes no attempt to predict LUT or FF
figures, which depend on synthesis details that are not available.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable

from .metrics import TABLE1

CSV_HEADER = (
    "variant",
    "dsp_published",
    "lut_published",
    "ff_published",
    "comparisons_model",
    "multiplies_model",
    "adds_model",
    "stored_model",
)


@dataclass(frozen=True)
class CostReport:
    variant: str
    comparisons: int
    multiplies: int
    adds: int
    stored_coefficients: int
    shift_add_mode: bool = False

    def __post_init__(self):
        if min(self.comparisons, self.multiplies, self.adds, self.stored_coefficients) < 0:
            raise ValueError("operation counts must be non-negative")
        if self.shift_add_mode and self.multiplies:
            raise ValueError("shift-add mode has no multipliers")

    @property
    def lut_proxy(self) -> int:
        return self.comparisons + self.adds + self.stored_coefficients


def pwl_cost(segments: int, shift_add_mode: bool = False) -> CostReport:
    """Worst-case primitive counts for one PWL evaluation.

    Segment search is counted as sequential comparisons against every
    breakpoint. In shift-add mode the slope multiply is replaced by
    ceil(log2(segments)) extra adds (a modelling convention, not a derived
    bound).
    """
    if segments < 2:
        raise ValueError("a PWL function needs at least 2 segments")
    adds = 1
    if shift_add_mode:
        adds += math.ceil(math.log2(segments))
    return CostReport(
        variant=f"{segments}-segment",
        comparisons=segments - 1,
        multiplies=0 if shift_add_mode else 1,
        adds=adds,
        stored_coefficients=2 * segments + (segments - 1),
        shift_add_mode=shift_add_mode,
    )


def reference_table() -> dict[str, tuple[int, int, int]]:
    """Published (DSP, LUT, FF) per tanh implementation."""
    return dict(TABLE1)


def reduction_ratios(variant: str = "3-segment") -> tuple[float, float]:
    """(LUT, FF) of the original tanh divided by those of ``variant``."""
    table = reference_table()
    _, lut0, ff0 = table["original"]
    _, lut, ff = table[variant]
    return lut0 / lut, ff0 / ff


def cost_rows(segments: Iterable[int] = (3, 5, 7, 9), shift_add_mode: bool = False) -> list[dict]:
    table = reference_table()
    rows = []
    dsp, lut, ff = table["original"]
    rows.append(dict(zip(CSV_HEADER, ("original", dsp, lut, ff, "", "", "", ""))))
    for k in segments:
        c = pwl_cost(k, shift_add_mode)
        dsp, lut, ff = table.get(c.variant, ("", "", ""))
        rows.append(
            dict(zip(CSV_HEADER, (c.variant, dsp, lut, ff, c.comparisons, c.multiplies, c.adds, c.stored_coefficients)))
        )
    return rows


def cost_report(segments: Iterable[int] = (3, 5, 7, 9), shift_add_mode: bool = False) -> str:
    """CSV with published and modelled columns side by side. The exact
    float tanh has no model entry; its model cells are left empty."""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_HEADER, lineterminator="\n")
    writer.writeheader()
    writer.writerows(cost_rows(segments, shift_add_mode))
    return buf.getvalue()
