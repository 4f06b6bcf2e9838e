"""Deep convolutional Gaussian mixture models trained by annealed SGD.

Layered mixtures composed of folding, pooling, GMM and linear classifier
layers, with density estimation, classification, conditional sampling,
sharpening, outlier detection and generative-replay continual learning.
"""

from .tensor import Tensor4, argmax_tiebreak, logsumexp
from .gmm import (AnnealingState, GmmParams, component_weights,
                  full_log_likelihood, init_params, log_weighted_densities,
                  loss_gradients, max_component_loss, sgd_step,
                  smoothed_loss, smoothing_weights, train_gmm,
                  update_annealing)
from .layers import (FoldingSpec, LinearParams, PoolingSpec, fold_backward,
                     fold_forward, linear_forward, linear_invert,
                     linear_train_step, pool_forward, unpool)
from .model import (DcgmmModel, GmmLayerSpec, LikelihoodStats,
                    LinearLayerSpec, build_model, format_architecture,
                    gmm_layer_forward, gmm_layer_loss, is_outlier,
                    parse_architecture, validate_architecture)
from .checkpoint import load_checkpoint, save_checkpoint
from .data import LabeledDataset, batcher, load_idx, save_idx, split_train_test
from .continual import (DcgmmLearner, MeasurementRecord, SltData, SltSpec,
                        accuracy, build_slt, gmr_train, omega_all,
                        run_prescient_protocol, run_realistic_protocol,
                        slt_spec)

__version__ = "0.1.0"
