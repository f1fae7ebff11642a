from .tensor import ShapeError, Tensor, default_dtype, set_default_dtype
from .autograd import SGD, GradientError, Node, Parameter, backward, grad_check, no_grad, sgd_step
from .standardize import StdConfig, batch_standardize, g_ibs, instance_standardize, z_score
from .slownet import MfnConfig, generate_global, generate_hyperweights, generate_local, make_grid
from .hyperzzw import ContextKernel, global_hyperzzw_1d, global_hyperzzw_2d, hyper_channel_interaction, hyper_interaction, local_hyperzzw
from .sfne import BranchError, SfneBlock, SfneConfig, sfne_forward
from .losses import channel_expand, cross_entropy, slow_neural_loss, total_loss
from .model import ModelConfig, Terminator, count_params, desk_config, reference_config, sequential_config, tiny_config
from .checkpoint import Checkpoint, CheckpointError, apply_checkpoint, load_checkpoint, save_checkpoint
from .data import DataFormatError, Dataset, batches, load_idx, load_mnist, synthetic, to_sequential
from .settings import ConfigError, ConfigManager, RunConfig, default_run_config, normalize_run_config
from .history import MetricHistory
