"""Bidirectional variational autoencoders in numpy.

One weight-shared network encodes on its forward pass and decodes through
the transposed weights on its reverse pass.
"""
from .autodiff import Parameter, ParamSet, Tape, grad_check
from .bilayers import BiConv2D, BiDense, BiResBlock, BiStack, Dense, GNova, gnova, param_count
from .data import Dataset, load_checkpoint, load_idx, save_checkpoint, write_image_grid
from .errors import (BvaeError, CheckpointError, ConfigError, ContractError, DimensionError,
                     NumericError, ParseError, ShapeConfigError, StateError)
from .kernels import BACKEND
from .metrics import (EvalReport, GmmModel, active_units, downstream_train_eval, fit_gmm,
                      nll_importance, psnr, ssim)
from .models import (Architecture, BvaeModel, GaussianPosterior, UnidirectionalTwin, build_model,
                     reparameterize)
from .objectives import (ObjectiveConfig, belbo_loss, bernoulli_nll, gaussian_kl, iwae_loss,
                         objective_loss, tcvae_loss)
from .tensor import Rng, conv2d, conv2d_transpose, matmul, standard_normal
from .train import AdamW, TrainConfig, adamw_step, evaluate, load_run, onecycle_lr, train

__version__ = "0.1.0"
