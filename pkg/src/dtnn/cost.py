"""Energy/delay/area estimation: float reference vs compiled LUT execution.

The float reference pays for arithmetic (one add + one multiply per MAC)
plus one 32-bit weight read per MAC from SRAM or DRAM. The LUT execution
pays per 6-LUT evaluation (Shannon-decomposition bound per table, every
node instance per inference, no activity factors), with a float-precision
preamble billed as arithmetic only -- its weights live in the datapath,
which is what makes the first layer the energy floor of the compiled
network. Pooling and wiring are billed at zero.

All constants load from a versioned JSON file so other technology nodes
can be swapped in.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources

__all__ = [
    "CostConstants",
    "CostReport",
    "ConsistencyError",
    "load_constants",
    "six_input_neuron_ratios",
    "estimate",
    "compare_to_paper",
    "round_sig",
]


class ConsistencyError(ValueError):
    """Census and netlist come from different models."""


@dataclass(frozen=True)
class CostConstants:
    """Per-operation costs. Energies in pJ, delays in ps, areas in um^2."""

    fp_add_energy: float
    fp_mul_energy: float
    lut6_energy: float
    sram_read_32b: float
    dram_read_32b: float
    fp_add_delay: float
    lut6_delay: float
    fp_add_area: float
    lut6_area: float
    neuron6_fp_energy: float
    name: str = "unnamed"
    version: int = 0
    reference_rows: dict = field(default_factory=dict)

    def __post_init__(self):
        for f in ("fp_add_energy", "fp_mul_energy", "lut6_energy", "sram_read_32b",
                  "dram_read_32b", "fp_add_delay", "lut6_delay", "fp_add_area",
                  "lut6_area", "neuron6_fp_energy"):
            if getattr(self, f) <= 0:
                raise ValueError(f"constant {f} must be positive")


def load_constants(path: str | None = None) -> CostConstants:
    """Load the bundled 45 nm constants, or a user-supplied JSON file."""
    if path is None:
        raw = resources.files("dtnn").joinpath("constants/tsmc45.json").read_text()
        doc = json.loads(raw)
    else:
        with open(path) as fh:
            doc = json.load(fh)
    return CostConstants(
        fp_add_energy=doc["fp_add_energy_pj"],
        fp_mul_energy=doc["fp_mul_energy_pj"],
        lut6_energy=doc["lut6_energy_pj"],
        sram_read_32b=doc["sram_read_32b_pj"],
        dram_read_32b=doc["dram_read_32b_pj"],
        fp_add_delay=doc["fp_add_delay_ns"] * 1000.0,  # ns -> ps
        lut6_delay=doc["lut6_delay_ps"],
        fp_add_area=doc["fp_add_area_um2"],
        lut6_area=doc["lut6_area_um2"],
        neuron6_fp_energy=doc["neuron6_fp_energy_pj"],
        name=doc.get("name", "unnamed"),
        version=doc.get("version", 0),
        reference_rows=doc.get("reference_rows", {}),
    )


def round_sig(x: float, sig: int = 3) -> float:
    if x == 0:
        return 0.0
    return round(x, sig - 1 - int(math.floor(math.log10(abs(x)))))


def six_input_neuron_ratios(c: CostConstants) -> dict:
    """Single 6-input neuron: float-adder implementation over one 6-LUT."""
    return {
        "energy": c.neuron6_fp_energy / c.lut6_energy,
        "delay": c.fp_add_delay / c.lut6_delay,
        "area": c.fp_add_area / c.lut6_area,
    }


@dataclass
class CostReport:
    rows: list
    weight_memory: str
    energy_fp_pj: float
    energy_lut_pj: float | None
    delay_fp_ps: float
    delay_lut_ps: float | None
    area_fp_um2: float
    area_lut_um2: float | None
    improvement_ratio: float | None
    preamble_share: float | None
    assumptions: list

    def to_json(self) -> dict:
        return {
            "weight_memory": self.weight_memory,
            "totals": {
                "energy_fp_pj": self.energy_fp_pj,
                "energy_lut_pj": self.energy_lut_pj,
                "energy_fp_uj": self.energy_fp_pj * 1e-6,
                "energy_lut_uj": None if self.energy_lut_pj is None
                else self.energy_lut_pj * 1e-6,
                "delay_fp_ps": self.delay_fp_ps,
                "delay_lut_ps": self.delay_lut_ps,
                "area_fp_um2": self.area_fp_um2,
                "area_lut_um2": self.area_lut_um2,
                "improvement_ratio": self.improvement_ratio,
                "preamble_share": self.preamble_share,
            },
            "layers": self.rows,
            "assumptions": self.assumptions,
        }

    def format_table(self) -> str:
        lines = [f"{'layer':<24}{'macs':>12}{'E_fp (pJ)':>16}{'E_lut (pJ)':>16}"]
        for r in self.rows:
            lut = "absent" if r["energy_lut_pj"] is None else f"{r['energy_lut_pj']:.4g}"
            lines.append(f"{r['name']:<24}{r['macs']:>12}{r['energy_fp_pj']:>16.4g}"
                         f"{lut:>16}")
        ratio = "N/A" if self.improvement_ratio is None else f"{self.improvement_ratio:.1f}x"
        lut_total = ("absent" if self.energy_lut_pj is None
                     else f"{self.energy_lut_pj * 1e-6:.4g} uJ")
        lines.append("-" * 68)
        lines.append(f"total FP {self.energy_fp_pj * 1e-6:.4g} uJ | LUT {lut_total} "
                     f"| improvement {ratio}")
        if self.preamble_share is not None:
            lines.append(f"FP preamble share of LUT-side energy: "
                         f"{self.preamble_share * 100:.1f}%")
        return "\n".join(lines)


def _shannon_luts(in_bits: int, out_bits: int) -> int:
    per_bit = 1 if in_bits <= 6 else (1 << (in_bits - 5)) - 1
    return out_bits * per_bit


def _mem_energy(memory_class: str, mode: str, c: CostConstants) -> float:
    if mode == "sram":
        return c.sram_read_32b
    if mode == "dram":
        return c.dram_read_32b
    if mode == "auto":
        # convolution weights are tiny and reused across positions (kept on
        # chip); fully connected weights stream once per inference from DRAM
        return c.sram_read_32b if memory_class == "conv" else c.dram_read_32b
    raise ValueError(f"unknown weight_memory mode {mode!r}")


def estimate(census: dict, netlist=None, constants: CostConstants | None = None,
             weight_memory: str = "sram") -> CostReport:
    """Cost both execution schemes of one model for a single inference.

    `census` comes from network.op_census / ensemble_census; `netlist` (the
    compiled model) supplies per-table widths for the LUT side and is
    checked against the census's model when both carry hashes. With no
    netlist the LUT side is reported as absent.
    """
    c = constants or load_constants()
    mac_e = c.fp_add_energy + c.fp_mul_energy
    if netlist is not None and census.get("model_hash") is not None:
        if netlist.model_hash != census["model_hash"]:
            raise ConsistencyError(
                f"netlist was compiled from model {netlist.model_hash[:12]}..., "
                f"census is for {census['model_hash'][:12]}...")

    lut_stage_costs = []
    if netlist is not None:
        from .lutc import LutLayerStage
        for m, stage in netlist.all_stages():
            if isinstance(stage, LutLayerStage):
                pos = stage.positions()
                luts = unique = 0
                for lvl in stage.levels:
                    if lvl.full is not None:
                        n_full = lvl.full.shape[1]
                        unique += stage.units * n_full * _shannon_luts(
                            lvl.in_bits_full, lvl.out_bits)
                    if lvl.ragged is not None:
                        unique += stage.units * _shannon_luts(
                            lvl.in_bits_ragged, lvl.out_bits)
                lut_stage_costs.append((unique * pos, unique))
        if netlist.combiner is not None:
            comb = netlist.combiner
            u = comb.n_classes * _shannon_luts(comb.n_members, comb.out_bits)
            lut_stage_costs.append((u, u))

    rows = []
    lut_i = 0
    for i, lr in enumerate(census["layers"]):
        row = {"name": f"{i}:{lr['kind']}", "kind": lr["kind"], "macs": lr["macs"],
               "memory_class": lr["memory_class"], "preamble": lr["preamble"]}
        arith = lr["macs"] * mac_e
        mem = 0.0
        if lr["macs"] and lr["memory_class"]:
            mem = lr["weight_reads"] * _mem_energy(lr["memory_class"], weight_memory, c)
        row["energy_fp_pj"] = arith + mem
        row["delay_fp_ps"] = (math.ceil(math.log2(max(lr.get("receptive_field", 1), 2)))
                              * c.fp_add_delay if lr["macs"] else 0.0)
        row["area_fp_um2"] = lr["macs"] * c.fp_add_area
        if lr["preamble"]:
            # float preamble rides along in the compiled network: arithmetic
            # only, weights resident in the datapath
            row["energy_lut_pj"] = arith
            row["delay_lut_ps"] = row["delay_fp_ps"]
            row["area_lut_um2"] = lr["macs"] * c.fp_add_area
        elif lr["table_lookups"]:
            if netlist is None:
                row["energy_lut_pj"] = None
                row["delay_lut_ps"] = None
                row["area_lut_um2"] = None
            else:
                dynamic, unique = lut_stage_costs[lut_i]
                lut_i += 1
                row["energy_lut_pj"] = dynamic * c.lut6_energy
                row["delay_lut_ps"] = lr["tree_depth"] * c.lut6_delay
                row["area_lut_um2"] = unique * c.lut6_area
        else:
            row["energy_lut_pj"] = 0.0
            row["delay_lut_ps"] = 0.0
            row["area_lut_um2"] = 0.0
        rows.append(row)

    def total(key):
        vals = [r[key] for r in rows]
        if any(v is None for v in vals):
            return None
        return float(sum(vals))

    energy_fp = total("energy_fp_pj")
    energy_lut = total("energy_lut_pj")
    preamble_share = None
    improvement = None
    if energy_lut:
        preamble = sum(r["energy_lut_pj"] for r in rows if r["preamble"])
        preamble_share = preamble / energy_lut
        improvement = energy_fp / energy_lut
    assumptions = [
        f"weight memory policy '{weight_memory}': one 32-bit read per MAC "
        f"(auto = SRAM for convolution, DRAM for fully connected)",
        "LUT energy counts every 6-LUT evaluation per inference "
        "(Shannon bound per table, no activity factors)",
        "float preamble billed as arithmetic only (weights in the datapath)",
        "pooling, flattening, and wiring billed at zero",
        "delay: balanced adder tree per layer (FP) vs tree depth (LUT), "
        "layers in series; area: fully parallel spatial implementation",
    ]
    return CostReport(
        rows=rows, weight_memory=weight_memory,
        energy_fp_pj=energy_fp or 0.0, energy_lut_pj=energy_lut,
        delay_fp_ps=total("delay_fp_ps") or 0.0, delay_lut_ps=total("delay_lut_ps"),
        area_fp_um2=total("area_fp_um2") or 0.0, area_lut_um2=total("area_lut_um2"),
        improvement_ratio=improvement, preamble_share=preamble_share,
        assumptions=assumptions)


def compare_to_paper(report: CostReport, model: str = "lenet5_4bit",
                     constants: CostConstants | None = None,
                     tolerance_factor: float = 3.0) -> dict:
    """Place our estimate next to the published row and flag deviations
    outside the documented tolerance band."""
    c = constants or load_constants()
    if model not in c.reference_rows:
        raise ValueError(f"no published reference row for {model!r}")
    ref = c.reference_rows[model]
    ours_fp_uj = report.energy_fp_pj * 1e-6
    ours_lut_uj = None if report.energy_lut_pj is None else report.energy_lut_pj * 1e-6
    out = {"model": model, "tolerance_factor": tolerance_factor,
           "ours": {"fp32_energy_uj": ours_fp_uj, "lut_energy_uj": ours_lut_uj,
                    "improvement": report.improvement_ratio,
                    "preamble_share": report.preamble_share},
           "published": ref, "deviations": {}}
    for key, ours in (("fp32_energy_uj", ours_fp_uj), ("lut_energy_uj", ours_lut_uj)):
        if key in ref and ours:
            ratio = ours / ref[key]
            out["deviations"][key] = {
                "ratio": ratio,
                "within_band": 1.0 / tolerance_factor <= ratio <= tolerance_factor}
    if "improvement" in ref and report.improvement_ratio:
        out["deviations"]["improvement"] = {
            "ratio": report.improvement_ratio / ref["improvement"],
            "within_band": report.improvement_ratio >= ref["improvement"] / 1.5}
    return out
