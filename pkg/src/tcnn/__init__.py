"""Texture CNNs (T-CNN) with an energy layer, implemented on numpy."""

from .network import NetworkGraph, grad_check, load_checkpoint, save_checkpoint
from .zoo import ModelSpec, build

__version__ = "0.1.0"

__all__ = ["ModelSpec", "NetworkGraph", "build", "grad_check", "load_checkpoint", "save_checkpoint"]
