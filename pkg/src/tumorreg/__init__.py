"""Tumor-aware recurrent deformable image registration on synthetic
thoracic phantoms, with a self-contained autodiff core and full metric
suite."""

from .autodiff import Tensor, Tape, backward
from .deformation import (DeformationField, VelocityField, compose, compose_all,
                          exp_svf, invert_svf, jacobian_det, warp_image, warp_mask)
from .engine import (Adam, EngineConfig, EngineError, forward_register,
                     load_checkpoint, optimize_pair, save_checkpoint, train)
from .losses import (LossWeights, StepRecord, masked_similarity, smoothness,
                     total_loss, tumor_obliteration, tumor_preservation)
from .metrics import (MetricsReport, dsc, delta_ptd, delta_t, hd95, m_lexs, mcd,
                      tumor_mse, vba_filter)
from .phantom import (PhantomSpec, RegistrationPair, default_spec, generate_phantom,
                      place_tumor, random_smooth_velocity, synth_pair)
from .volio import Volume, preprocess, read_volume, restore, write_volume

__version__ = "0.1.0"
