"""Temporal grounding at desk scale: selective scans, spiking saliency, losses.

The library is organized bottom-up:

    autodiff    tape-based reverse-mode engine on numpy arrays
    kernels     compiled scan/LIF hot loops plus numpy reference twins
    ssm         ZOH discretization, LTI scan/conv routes, selective scan
    snn         LIF dynamics, spiking attention, proposal decoding
    blocks      scan blocks, slots, the grounding model
    losses      contrastive / span / saliency objectives
    metrics     IoU, recall@1, interpolated AP, report writers
    synth       deterministic synthetic grounding tasks (JSON-Lines I/O)
    training    Adam loop, batching, evaluation
    checkpoint  binary checkpoint + JSON manifest
    cli         spikeground gen/train/eval/ablate/bench
"""

from .autodiff import Tensor, Tape, backward, no_grad
from .blocks import GroundingModel, ModelConfig, concat_slots
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import (ContractError, DimensionError, DomainError,
                     NumericalError, ParseError)
from .losses import (LossWeights, contrastive_alignment_loss,
                     saliency_contrast_loss, span_regression_loss)
from .metrics import grounding_report, temporal_iou
from .snn import (LIFConfig, MomentProposal, SpikeTrain, decode_proposals,
                  firing_rate, lif_forward)
from .ssm import (ContinuousSSM, ConvKernel, DiscreteSSM, conv_scan,
                  prefix_scan, recurrent_scan, selective_scan, zoh_discretize)
from .synth import GroundingSample, MomentLabel, TaskSpec, generate, read_dataset, write_dataset
from .training import Adam, RunConfig, evaluate, train

__version__ = "0.1.0"
