"""Self-supervised domain adaptation of a latent face tracker, on synthetic data."""
from .encoder import EncoderModel, init_encoder, load_encoder, save_encoder
from .evalmetrics import marker_reprojection_error, relative_reprojection_error, stability
from .facemodel import DecoderModel, load_decoder, save_decoder, synth_identity
from .geomcore import HeadPose, MeshTopology
from .losses import ColorCorrection, LossWeights, loss_da
from .synthdata import DomainSpec, LabDataset, WildSequence, generate_lab, generate_wild
from .trainer import TrainConfig, adapt, fit_color_correction, pretrain, track

__version__ = "0.1.0"
