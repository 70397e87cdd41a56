"""Ownership verification of gray-box image classifiers via probability-steering
adversarial probes, with a small numpy network engine to run it end to end."""

from .attack import (AttackParams, AttackRequest, AttackTrace, generate_ifdgsm,
                     generate_ifgsm, ifdgsm_step, ifgsm_step, make_request)
from .data import LabeledDataset, builtin_synthetic_dataset, load_dataset
from .metrics import SsimParams, prob_distance, ssim
from .network import (Network, NetworkSpec, init_network, input_gradient, load_model,
                      save_model, spec_by_name)
from .protocol import (ExperimentReport, GrayBoxOracle, Verdict, VerificationRequest,
                       owner_verify, run_separation_experiment, third_party_verify)
from .train import train

__version__ = "0.1.0"
