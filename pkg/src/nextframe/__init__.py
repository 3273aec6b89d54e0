"""Next-frame forecasting for grayscale image time series.

Stack-LSTM, CNN-LSTM and ConvLSTM models written directly against numpy,
with hand-derived backward passes, an Adam optimizer, and a benchmark
harness that writes CSV and image artifacts.
"""

__version__ = "0.1.0"

from .data import FrameSequence, WindowedDataset, chrono_split, ingest_frames, make_windows, preprocess, synth_sequence
from .metrics import evaluate, ssim
from .model import ConfigError, ModelConfig, build_model, model_forward
from .training import fit, load_checkpoint, predict_next, save_checkpoint

__all__ = [
    "ConfigError",
    "FrameSequence",
    "ModelConfig",
    "WindowedDataset",
    "build_model",
    "chrono_split",
    "evaluate",
    "fit",
    "ingest_frames",
    "load_checkpoint",
    "make_windows",
    "model_forward",
    "predict_next",
    "preprocess",
    "save_checkpoint",
    "ssim",
    "synth_sequence",
]
