"""Stage-wise feature transfer from a frozen parent network into a compact child network."""

from .blocks import BlockNet, freeze, native_forward, parse_net_spec
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, parse_config
from .data import Dataset, batch_iter, gen_spiral, gen_textured_patches, load_cifar10_binary
from .etm import EtmStage, TransferAdapter, build_stages, etm_fuse, genetic_attention
from .tensor import Tensor, backward, no_grad
from .train import LossWeights, combined_loss, hkt_forward, train_loop

__version__ = "0.1.0"

__all__ = [
    "BlockNet", "Dataset", "EtmStage", "ExperimentConfig", "LossWeights", "Tensor", "TransferAdapter",
    "backward", "batch_iter", "build_stages", "combined_loss", "etm_fuse", "freeze", "gen_spiral",
    "gen_textured_patches", "genetic_attention", "hkt_forward", "load_checkpoint", "load_cifar10_binary",
    "native_forward", "no_grad", "parse_config", "parse_net_spec", "save_checkpoint", "train_loop",
]
