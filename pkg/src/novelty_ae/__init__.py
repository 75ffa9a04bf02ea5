"""One-class novelty detection with a dual-adversarial autoencoder.

Train on a single known class, then flag test samples whose
reconstructions drift away from them — measured in the input
discriminator's feature spaces rather than raw pixels.
"""

from .config import ConfigError, TrainConfig, desk_preset, load_config
from .data import LabeledImages, OneClassSplit, load_dataset, make_split, rescale
from .evaluation import (EvalResult, auc, evaluate_split, load_trained_model,
                         run_protocol, score_split)
from .losses import (assemble_eg_objective, hinge_d_loss, hinge_g_loss,
                     latent_cycle_loss, multi_level_recon_loss)
from .networks import (NoveltyModel, Encoder, Generator, InputDiscriminator,
                       LatentDiscriminator, build_model)
from .scoring import (ScoreRecord, decide, read_scores, score_alignment,
                      score_batch, score_consistency, score_per_pixel,
                      select_scores, write_scores)
from .trainer import Trainer, TrainingAbort, latent_containment, sample_prior, train

__version__ = "1.0.0"

__all__ = [
    "ConfigError", "TrainConfig", "desk_preset", "load_config",
    "LabeledImages", "OneClassSplit", "load_dataset", "make_split", "rescale",
    "EvalResult", "auc", "evaluate_split", "load_trained_model",
    "run_protocol", "score_split",
    "assemble_eg_objective", "hinge_d_loss", "hinge_g_loss",
    "latent_cycle_loss", "multi_level_recon_loss",
    "NoveltyModel", "Encoder", "Generator", "InputDiscriminator",
    "LatentDiscriminator", "build_model",
    "ScoreRecord", "decide", "read_scores", "score_alignment", "score_batch",
    "score_consistency", "score_per_pixel", "select_scores", "write_scores",
    "Trainer", "TrainingAbort", "latent_containment", "sample_prior", "train",
    "__version__",
]
