"""Prompt learning and in-context learning on a small frozen vision-language model."""
from .exceptions import VLPromptError
from .vlm import VLModel, load, save

__version__ = "0.1.0"
__all__ = ["VLModel", "VLPromptError", "load", "save", "__version__"]
