"""Pyramid-bottleneck 3D CNN for eye-blink sequence classification, built on numpy."""
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Manifest, SequenceSample, load_arrays, load_manifest, synth_generate
from .model import Model, PbbnConfig, build, count_params, describe, summarize
from .resample import Image, InterpMethod, ResizePolicy, preprocess, resize
from .tensor import TensorND, create, matmul, reduce
from .training import TrainConfig, cross_validate, grad_check, metrics, train

__version__ = "0.1.0"
