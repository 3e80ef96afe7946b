"""Analytical latency, energy, and memory model for a systolic PE-array
accelerator executing convolutional/capsule classifiers.

The model is layer-wise and purely arithmetic. Weights are streamed into the
array in groups sized by the array geometry; each group occupies the array
for one pass over the layer's weights, and feature maps add one cycle per
output position. Off-chip traffic is charged per burst of
:data:`MEM_ACCESS_BURST` accesses. With the default 16x16 geometry the
formulas reduce to the published closed forms this model is built around.

Power and per-access energy are deliberately required inputs: they come from
synthesis and memory-compiler runs and have no universal default.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

from .genotype import Genotype, LayerDescriptor

# Off-chip accesses are amortized over bursts of this many transfers.
MEM_ACCESS_BURST = 128

# Weight counts beyond this range signal an absurd genotype rather than a
# model worth costing.
_MAX_WEIGHTS = 2**63 - 1


class CostOverflowError(OverflowError):
    """Layer weight count exceeds the modeled integer range."""


@dataclass(frozen=True)
class HardwareConfig:
    """Accelerator constants. Power (mW) and access energy (pJ) must be
    supplied by the user; clock period defaults to 3 ns."""

    pe_power_mw: float
    mem_access_energy_pj: float
    clock_period_ns: float = 3.0
    pe_rows: int = 16
    pe_cols: int = 16
    bytes_per_weight: int = 4
    load_weights_cycles: int = 0

    def __post_init__(self) -> None:
        if any(v <= 0 for v in (self.clock_period_ns, self.pe_rows,
                                self.pe_cols, self.bytes_per_weight)):
            raise ValueError("clock period and array geometry must be positive")
        # Zero power/energy is allowed so cost terms can be switched off.
        if self.pe_power_mw < 0 or self.mem_access_energy_pj < 0:
            raise ValueError("power and access energy must be >= 0")
        if self.load_weights_cycles < 0:
            raise ValueError("load_weights_cycles must be >= 0")


class ShapeParams(NamedTuple):
    w_l: int
    s_l: int
    f_l: int


@dataclass(frozen=True)
class LayerCost:
    """Per-layer quantities feeding the network aggregates."""

    w_l: int
    s_l: int
    f_l: int
    w_pe_array: int
    m_acc: int
    c_l: int


@dataclass(frozen=True)
class NetworkCost:
    latency_ms: float
    energy_mj: float
    memory_mib: float
    total_cycles: int
    total_weights: int
    per_layer: tuple[LayerCost, ...]


def layer_shape_params(d: LayerDescriptor) -> ShapeParams:
    """Weight count, summands per output, and feature maps per weight pass.

    Convolutions contribute K^2 multiplies per input position; fully
    connected layers read their whole IFM^2 grid at once and emit a single
    position. Capsule dimensions enter multiplicatively on both sides.
    """
    if d.layer_type.is_spatial:
        window = d.kernel_size * d.kernel_size
        f_l = d.ofm_size * d.ofm_size
    else:
        window = d.ifm_size * d.ifm_size
        f_l = 1
    s_l = window * d.in_channels * d.in_capsules
    w_l = s_l * d.out_channels * d.out_capsules
    if w_l > _MAX_WEIGHTS:
        raise CostOverflowError(f"layer weight count {w_l} exceeds modeled range")
    return ShapeParams(w_l=w_l, s_l=s_l, f_l=f_l)


def weight_load_groups(w_l: int, s_l: int, pe_rows: int = 16,
                       pe_cols: int = 16) -> int:
    """Number of weight groups streamed into the array for one layer.

    Columns hold parallel weight lanes; rows bound how many summands of one
    output can be mapped at once.
    """
    return math.ceil(w_l / (pe_cols * min(pe_rows, s_l)))


def memory_accesses(s_l: int, f_l: int, pe_rows: int = 16,
                    pe_cols: int = 16) -> int:
    """Off-chip accesses for a layer.

    Single-position layers refill the whole array once; sliding layers pay
    one column burst per summand beyond what the rows absorb.
    """
    if f_l == 1:
        return pe_rows * pe_cols
    return pe_cols * max(s_l - (pe_rows - 1), 1)


def layer_cycles(w_l: int, w_pe_array: int, f_l: int) -> int:
    """Clock cycles to process one layer: weight streaming plus one cycle
    per output position."""
    return w_l * w_pe_array + f_l


def layer_cost(d: LayerDescriptor, hw: HardwareConfig) -> LayerCost:
    w_l, s_l, f_l = layer_shape_params(d)
    groups = weight_load_groups(w_l, s_l, hw.pe_rows, hw.pe_cols)
    m_acc = memory_accesses(s_l, f_l, hw.pe_rows, hw.pe_cols)
    return LayerCost(w_l=w_l, s_l=s_l, f_l=f_l, w_pe_array=groups,
                     m_acc=m_acc, c_l=layer_cycles(w_l, groups, f_l))


def estimate(g: Genotype, hw: HardwareConfig) -> NetworkCost:
    """Aggregate layer costs into network latency (ms), energy (mJ), and
    memory footprint (MiB).

    The memory-energy burst term is charged per layer and summed. With the
    clock period in ns and power in mW the cycle term lands directly in pJ.
    """
    per_layer = tuple(layer_cost(d, hw) for d in g.layers)
    total_cycles = sum(c.c_l for c in per_layer)
    total_weights = sum(c.w_l for c in per_layer)

    latency_ns = total_cycles * hw.clock_period_ns
    access_pj = sum(math.ceil(c.m_acc / MEM_ACCESS_BURST) for c in per_layer) \
        * hw.mem_access_energy_pj
    compute_pj = sum(c.c_l * hw.clock_period_ns * hw.pe_power_mw
                     for c in per_layer)
    return NetworkCost(
        latency_ms=latency_ns / 1e6,
        energy_mj=(access_pj + compute_pj) / 1e9,
        memory_mib=total_weights * hw.bytes_per_weight / 2**20,
        total_cycles=total_cycles,
        total_weights=total_weights,
        per_layer=per_layer,
    )
