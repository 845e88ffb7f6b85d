from .base import (BACKGROUND_PROMPT, FOREGROUND_TEMPLATE, BackendDescriptor, DenoiseResult,
                   DiffusionBackend, GuidanceSpec, LatentCode, NoiseSchedule, PromptSpec)
from .toy import ToyBackend, pretrain_toy_backend

__all__ = [
    "BACKGROUND_PROMPT", "FOREGROUND_TEMPLATE", "BackendDescriptor", "DenoiseResult", "DiffusionBackend",
    "GuidanceSpec", "LatentCode", "NoiseSchedule", "PromptSpec", "ToyBackend", "pretrain_toy_backend",
]
