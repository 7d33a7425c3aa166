"""Self-supervised clustering of face tracks at the embedding level.

The pipeline finetunes a small student/teacher network on positive crop
pairs, filters low-quality tracks by dropout stability, links tracks through
per-track Gaussian densities, and clusters the survivors with per-track
thresholds on the learned loss metric.
"""
__version__ = "0.1.0"

from .config import RunConfig
from .data import SyntheticConfig, Track, TrackDataset, generate_synthetic, load_dataset, save_dataset
from .evaluation import evaluate, pcr, wcp
from .pipeline import cluster_with_model, run_pipeline

__all__ = [
    "RunConfig", "SyntheticConfig", "Track", "TrackDataset", "cluster_with_model", "evaluate",
    "generate_synthetic", "load_dataset", "pcr", "run_pipeline", "save_dataset", "wcp",
]
