"""Fiber-channel simulation, a conventional coherent baseline and an end-to-end
autoencoder trained through the split-step channel with a small numpy autodiff engine."""
from .autoencoder import AeRxParams, AeTxParams, TrainConfig, TrainResult, desk_channel, train
from .channel import ChannelConfig, NoiseModel, adc, dac, linear_propagate, ssfm_propagate
from .conventional import Constellation, conventional_link, conventional_receive, conventional_tx
from .metrics import estimate_mi, snr, spectral_efficiency, symbol_error_rate
from .signal import ComplexSignal, Spectrum, SymbolBlock, dbm_to_watt, watt_to_dbm

__version__ = "0.1.0"

__all__ = [
    "AeRxParams", "AeTxParams", "TrainConfig", "TrainResult", "desk_channel", "train",
    "ChannelConfig", "NoiseModel", "adc", "dac", "linear_propagate", "ssfm_propagate",
    "Constellation", "conventional_link", "conventional_receive", "conventional_tx",
    "estimate_mi", "snr", "spectral_efficiency", "symbol_error_rate",
    "ComplexSignal", "Spectrum", "SymbolBlock", "dbm_to_watt", "watt_to_dbm",
]
