"""STNet change detection for co-registered bi-temporal images."""
from .backbone import EncoderConfig, build_encoder, extract_bitemporal, extract_pyramid
from .config import ModelConfig, RunConfig, TrainConfig, load_config
from .data import BiTemporalTile, load_dataset, synth_generate, tile_pair
from .decoder import binarize, to_probability
from .losses import DiceConfig, FocalConfig, dice_loss, focal_loss, hybrid_loss
from .metrics import ConfusionCounts, Scores, accumulate, finalize, merge
from .model import STNet, build_model
from .training import Checkpoint, evaluate, load_checkpoint, lr_at, predict, save_checkpoint, train

__version__ = "0.1.0"
