"""Masked discrete generation: unified masked-token loss, reverse-process samplers
with interval guidance, and a Gaussian-mixture diffusion head, all checkable
against exact enumeration on toy data."""

from .masking import MASK, ToyDataset
from .schedule import MaskSchedule, TimeWindow
from .loss import LossConfig, loss_exact, loss_mc, maskgit_loss_exact
from .models import UNCOND_FAKE, UNCOND_MASK, LearnedCatModel, OracleModel
from .sampler import CfgConfig, SamplerConfig, generate

__version__ = "0.1.0"
