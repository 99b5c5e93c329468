import numpy as np
import pytest

from dtnn.cost import (ConsistencyError, compare_to_paper, estimate, load_constants,
                       round_sig, six_input_neuron_ratios)
from dtnn.lutc import compile_network
from dtnn.modelio import model_hash
from dtnn.network import build_model, calibrate, op_census

CONSTANTS = load_constants()


class TestConstants:
    def test_loads_versioned_file(self):
        assert CONSTANTS.name == "tsmc45"
        assert CONSTANTS.version == 1

    def test_published_single_neuron_ratios_to_3_significant_figures(self):
        r = six_input_neuron_ratios(CONSTANTS)
        ref = CONSTANTS.reference_rows["six_input_neuron"]
        assert round_sig(r["energy"], 3) == round_sig(ref["energy_ratio"], 3)
        assert round_sig(r["delay"], 3) == round_sig(ref["delay_ratio"], 3)
        assert round_sig(r["area"], 3) == round_sig(ref["area_ratio"], 3)

    def test_one_mac_with_sram_weight(self):
        # add + multiply + one 32-bit SRAM read
        assert CONSTANTS.fp_add_energy + CONSTANTS.fp_mul_energy + \
            CONSTANTS.sram_read_32b == pytest.approx(9.6)

    def test_rejects_nonpositive_constants(self):
        import dataclasses
        with pytest.raises(ValueError):
            dataclasses.replace(CONSTANTS, lut6_energy=0.0)


@pytest.fixture(scope="module")
def lenet_pair():
    net = build_model("lenet5", 2, 4, seed=0)
    calibrate(net, np.random.default_rng(0).random((32, 1, 28, 28)))
    census = op_census(net)
    netlist = compile_network(net)
    return net, census, netlist


class TestEstimate:
    def test_empty_model_reports_all_zero(self):
        report = estimate({"layers": []}, None, CONSTANTS)
        assert report.energy_fp_pj == 0.0
        assert report.improvement_ratio is None
        assert "N/A" in report.format_table()

    def test_additivity(self, lenet_pair):
        _, census, netlist = lenet_pair
        report = estimate(census, netlist, CONSTANTS, weight_memory="auto")
        for total, key in ((report.energy_fp_pj, "energy_fp_pj"),
                           (report.energy_lut_pj, "energy_lut_pj"),
                           (report.delay_fp_ps, "delay_fp_ps"),
                           (report.delay_lut_ps, "delay_lut_ps"),
                           (report.area_fp_um2, "area_fp_um2"),
                           (report.area_lut_um2, "area_lut_um2")):
            assert total == pytest.approx(sum(r[key] for r in report.rows)), key

    def test_dram_strictly_costlier_than_sram(self, lenet_pair):
        _, census, netlist = lenet_pair
        sram = estimate(census, netlist, CONSTANTS, weight_memory="sram")
        dram = estimate(census, netlist, CONSTANTS, weight_memory="dram")
        assert dram.energy_fp_pj > sram.energy_fp_pj
        assert dram.energy_lut_pj == sram.energy_lut_pj  # LUT side reads no weights

    def test_missing_netlist_marks_lut_side_absent(self, lenet_pair):
        _, census, _ = lenet_pair
        report = estimate(census, None, CONSTANTS)
        assert report.energy_lut_pj is None
        assert report.improvement_ratio is None
        assert report.energy_fp_pj > 0

    def test_act_bits_monotonicity(self):
        energies = []
        for bits in (2, 3, 4):
            net = build_model("lenet5", 2, bits, seed=0)
            calibrate(net, np.random.default_rng(0).random((16, 1, 28, 28)))
            report = estimate(op_census(net), compile_network(net), CONSTANTS)
            energies.append(report.energy_lut_pj)
        assert energies == sorted(energies)

    def test_fan_in_monotonicity_above_lut_capacity(self):
        # holds once fan_in * bits >= 6: table growth outpaces node reduction
        energies = []
        for fan in (2, 3, 4):
            net = build_model("lenet5", fan, 3, seed=0)
            calibrate(net, np.random.default_rng(0).random((16, 1, 28, 28)))
            report = estimate(op_census(net), compile_network(net), CONSTANTS)
            energies.append(report.energy_lut_pj)
        assert energies == sorted(energies)

    def test_hash_mismatch_rejected(self, lenet_pair):
        net, census, netlist = lenet_pair
        census = dict(census)
        census["model_hash"] = "0" * 64
        with pytest.raises(ConsistencyError):
            estimate(census, netlist, CONSTANTS)

    def test_hash_match_accepted(self, lenet_pair):
        net, census, netlist = lenet_pair
        census = dict(census)
        census["model_hash"] = model_hash(net)
        estimate(census, netlist, CONSTANTS)


class TestPaperComparison:
    def test_lenet_4bit_bands(self, lenet_pair):
        _, census, netlist = lenet_pair
        report = estimate(census, netlist, CONSTANTS, weight_memory="auto")
        cmp = compare_to_paper(report, "lenet5_4bit", CONSTANTS)
        assert cmp["deviations"]["fp32_energy_uj"]["within_band"]
        assert cmp["deviations"]["lut_energy_uj"]["within_band"]
        assert report.improvement_ratio >= 50.0
        assert report.preamble_share >= 0.95

    def test_unknown_row_rejected(self, lenet_pair):
        _, census, netlist = lenet_pair
        report = estimate(census, netlist, CONSTANTS)
        with pytest.raises(ValueError):
            compare_to_paper(report, "vgg11_imagenet", CONSTANTS)
