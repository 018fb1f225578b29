"""Quantization-aware training for spiking neural networks with a sigmoid-sum quantizer."""

from .network import NetworkSpec, build_network, parse_topology, preset
from .neuron import LifParams, SurrogateParams
from .quantizer import (
    LayerQuantState,
    QuantLevels,
    QuantSpec,
    derive_spec,
    quantize_soft,
    quantize_soft_grads,
    quantize_step,
    temperature_at,
    uniform_levels,
)
from .trainer import TrainConfig, evaluate, train

__version__ = "0.1.0"
