"""HiSTM: hierarchical spatiotemporal Mamba forecaster for grid traffic."""

from histm.data import (GridSeries, SampleWindow, ScalerParams, WindowSpec,
                        generate_synthetic, load_series)
from histm.mamba import MambaConfig, MambaParams
from histm.model import (HiSTMConfig, HiSTMParams, init_histm_params, param_count,
                         predict, predict_batch)
from histm.training import (Checkpoint, TrainConfig, load_checkpoint,
                            save_checkpoint, train_loop)

__version__ = "0.1.0"

__all__ = [
    "GridSeries", "SampleWindow", "ScalerParams", "WindowSpec",
    "generate_synthetic", "load_series",
    "MambaConfig", "MambaParams",
    "HiSTMConfig", "HiSTMParams", "init_histm_params", "param_count",
    "predict", "predict_batch",
    "Checkpoint", "TrainConfig", "load_checkpoint", "save_checkpoint",
    "train_loop",
    "__version__",
]
