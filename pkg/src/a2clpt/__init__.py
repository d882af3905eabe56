"""Weakly-supervised temporal activity localization with adversarial angular
center losses, trained end to end with hand-derived gradients."""

from .centers import CenterBank, TripletStats, center_grads, nearest_negative, update_centers
from .data import Dataset, DatasetError, SynthConfig, VideoSample, load_dataset, synth_generate, write_dataset
from .evaluator import EvalReport, average_precision, iou, map_over_thresholds
from .localizer import Detection, classify, extract_segments, localize
from .loss import BranchLossInput, LossBreakdown, TripletHyper, aclpt_loss, cls_loss
from .model import Checkpoint, Params, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, TrainLog, forward_backward, gradcheck, train

__version__ = "0.1.0"
