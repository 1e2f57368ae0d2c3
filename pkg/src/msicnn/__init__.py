"""From-scratch CNN training for multispectral image classification."""

from .dataio import LabeledDataset, MultispectralImage, SyntheticSpec, generate_synthetic, load_dataset
from .network import Network, NetworkConfig, build, desk_preset, paper_preset, tiny_preset
from .preprocess import AugmentationPolicy, SpectralPCA, apply_pca, augment, fit_pca
from .trainer import TrainingConfig, grid_search, kfold_split, run_cv, train_fold

__version__ = "0.1.0"

__all__ = [
    "LabeledDataset", "MultispectralImage", "SyntheticSpec", "generate_synthetic", "load_dataset",
    "Network", "NetworkConfig", "build", "desk_preset", "paper_preset", "tiny_preset",
    "AugmentationPolicy", "SpectralPCA", "apply_pca", "augment", "fit_pca",
    "TrainingConfig", "grid_search", "kfold_split", "run_cv", "train_fold",
]
