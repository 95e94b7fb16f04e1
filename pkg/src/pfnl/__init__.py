"""Few-shot vision-language adaptation over frozen embedding banks."""

__version__ = "0.1.0"

from .bank import (ClassGallery, EmbeddingBank, Episode, generate_synthetic,
                   inject_label_noise, load_bank, sample_episode, save_bank)
from .config import TrainConfig
from .objective import Hyperparams
from .params import AdapterParams
from .trainer import Checkpoint, evaluate, load_checkpoint, noise_sweep, save_checkpoint, train

__all__ = [
    "AdapterParams", "Checkpoint", "ClassGallery", "EmbeddingBank", "Episode",
    "Hyperparams", "TrainConfig", "evaluate", "generate_synthetic",
    "inject_label_noise", "load_bank", "load_checkpoint", "noise_sweep",
    "sample_episode", "save_bank", "save_checkpoint", "train", "__version__",
]
