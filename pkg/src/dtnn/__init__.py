"""dtnn: lookup-table inference for dendrite-tree quantized networks.

Train activation-quantized tree networks, compile them into pure
lookup-table netlists that reproduce the quantized reference bit for bit,
and estimate the energy/delay/area gap against a float reference.
"""

__version__ = "0.1.0"

from .quant import BinarizeSpec, QuantSpec, binarize, dequantize, fake_quantize, quantize
from .dtree import (ACTIVATIONS, DtreeNeuron, DtreeTopology, build_topology,
                    convert_traditional, count_weights_constructive,
                    count_weights_formula, eval_neuron)
from .network import (DtreeNetwork, EnsembleClassifier, build_ensemble, build_model,
                      calibrate, ensemble_census, forward, forward_codes, op_census,
                      predict)
from .mnist import LabeledImages, load_mnist

__all__ = [
    "__version__",
    "BinarizeSpec", "QuantSpec", "binarize", "dequantize", "fake_quantize", "quantize",
    "ACTIVATIONS", "DtreeNeuron", "DtreeTopology", "build_topology",
    "convert_traditional", "count_weights_constructive", "count_weights_formula",
    "eval_neuron",
    "DtreeNetwork", "EnsembleClassifier", "build_ensemble", "build_model", "calibrate",
    "ensemble_census", "forward", "forward_codes", "op_census", "predict",
    "LabeledImages", "load_mnist",
]
