"""Local contrastive learning with overlapping units, plus memory and
pipeline-schedule analysis."""
from .analysis import (MemoryModel, ScheduleReport, StageStats, fit_overhead, peak_memory,
                       simulate_parallel, stage_stats)
from .autograd import Graph, GraphError, NonFiniteError, ParamStore, ShapeError, gradcheck
from .blocks import ArchitectureSpec, BlockSpec, ConvSpec, StageSpec, build_encoder, preset_arch
from .contrastive import AugmentConfig, ContrastiveBatch, DecoderSpec, augment, build_decoder, info_nce
from .data import ImageDataset, make_synthetic, read_raw, write_raw
from .optim import OptimizerConfig, ScheduleConfig, lars_step, lr_at, sgd_step
from .topology import LocalNetwork, TopologySpec, build_units
from .training import (Checkpoint, LinearProbe, LocalContrastiveEncoder, ProbeConfig, TrainConfig,
                       linear_probe, load_checkpoint, save_checkpoint, train)

__version__ = "0.1.0"
