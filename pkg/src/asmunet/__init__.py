"""3D biliary-tract segmentation with adaptive scanning Mamba blocks."""

from .asm import AsmBlock, AsmConfig
from .config import RunConfig, preset
from .unet import ASMUNet, NetConfig

__all__ = ["ASMUNet", "AsmBlock", "AsmConfig", "NetConfig", "RunConfig", "preset"]
__version__ = "0.1.0"
