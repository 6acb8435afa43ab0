"""2.5D unpaired volume translation with intra- and inter-slice self-attention."""

from .attention import AttentionWeights, inter_slice_attention, intra_slice_attention, patch_embed, patch_unembed
from .model import Discriminator, TranslationModel, TranslatorConfig, translate_mini_volume, translate_volume
from .train import CycleLog, CycleTrainConfig, sample_minis, train_cycle

__all__ = [
    "AttentionWeights", "patch_embed", "patch_unembed", "intra_slice_attention", "inter_slice_attention",
    "TranslationModel", "TranslatorConfig", "Discriminator", "translate_mini_volume", "translate_volume",
    "CycleTrainConfig", "CycleLog", "train_cycle", "sample_minis",
]
