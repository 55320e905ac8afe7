"""fusionkit: fuse multi-layer hidden states of frozen encoders into task features.

The package maps one or more L x T x D hidden-state stacks to a single
T x D feature sequence through trainable interfaces (softmax layer
weighting, per-dimension Gumbel selection, hierarchical 1-D convolution
over the layer axis with addition or concatenation merges), trains them
jointly with lightweight task heads, and evaluates with CER, accuracy,
and EER. Everything runs on an internal float64 reverse-mode autodiff
engine with finite-difference verification.
"""

from .bundles import (HiddenStateBundle, SynthDataset, SynthEncoder, encode,
                      make_complementary_task, make_ctc_task,
                      make_layered_ctc_task, make_verify_task, read_bundle,
                      write_bundle)
from .heads import (BLANK, ClassifyHead, CtcHead, VerifyHead, cosine_score,
                    ctc_greedy_decode, ctc_loss, embed_utterance, nll_loss)
from .interfaces import (Interface, InterfaceConfig, build_interface,
                         concat_project, gumd_forward, hconv_stage_lengths,
                         load_checkpoint, param_count, save_checkpoint, ws_forward)
from .matching import (MatchPolicy, MergedStack, match_bundles, merge_add,
                       merge_concat, resample_linear)
from .metrics import EvalReport, accuracy, cer, edit_distance, eer
from .tensor import Tensor, backward, conv1d, elementwise, grad_check, matmul, \
    sample_gumbel, softmax
from .training import (EncoderSpec, ExperimentConfig, OptimizerState, RunResult,
                       TaskSpec, adam_step, fit_probe, fusion_gain, run_grid, train)

__version__ = "0.1.0"

__all__ = [
    "HiddenStateBundle", "SynthDataset", "SynthEncoder", "encode",
    "make_complementary_task", "make_ctc_task", "make_layered_ctc_task",
    "make_verify_task", "read_bundle", "write_bundle",
    "BLANK", "ClassifyHead", "CtcHead", "VerifyHead", "cosine_score",
    "ctc_greedy_decode", "ctc_loss", "embed_utterance", "nll_loss",
    "Interface", "InterfaceConfig", "build_interface", "concat_project",
    "gumd_forward", "hconv_stage_lengths", "load_checkpoint", "param_count",
    "save_checkpoint", "ws_forward",
    "MatchPolicy", "MergedStack", "match_bundles", "merge_add", "merge_concat",
    "resample_linear",
    "EvalReport", "accuracy", "cer", "edit_distance", "eer",
    "Tensor", "backward", "conv1d", "elementwise", "grad_check", "matmul",
    "sample_gumbel", "softmax",
    "EncoderSpec", "ExperimentConfig", "OptimizerState", "RunResult", "TaskSpec",
    "adam_step", "fit_probe", "fusion_gain", "run_grid", "train",
]
