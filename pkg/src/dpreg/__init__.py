"""Probabilistic-displacement 3D registration with learned driving points."""
from .autodiff import ParameterSet, Tape, Tensor, adam_step, load_params, save_params
from .pipeline import RegistrationConfig, RegistrationResult, register, train
from .synth import SyntheticSpec, synth_generate
from .volume import LabelVolume, Volume, read_lab3, read_vol3, sample_trilinear, warp, write_lab3, write_vol3

__version__ = "0.1.0"

__all__ = [
    "LabelVolume", "ParameterSet", "RegistrationConfig", "RegistrationResult", "SyntheticSpec",
    "Tape", "Tensor", "Volume", "adam_step", "load_params", "read_lab3", "read_vol3", "register",
    "sample_trilinear", "save_params", "synth_generate", "train", "warp", "write_lab3", "write_vol3",
]
