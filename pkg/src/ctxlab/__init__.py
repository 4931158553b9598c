"""Desk-scale laboratory for context extension of a 4-bit frozen base with low-rank adapters."""

from .attention import GlobalPattern, ShiftShortPattern, attend, make_pattern
from .data import END_ID, VOCAB_SIZE, detokenize, load_corpus, tokenize
from .errors import LabError
from .lora import LoraAdapter, init_adapter
from .model import Model, ModelConfig, build_model
from .quant import NF4, QuantizedTensor, dequantize_tensor, quantize_tensor
from .rope import RopeTable, apply_rope, build_rope_table
from .tensor import Tensor, backward

__version__ = "0.1.0"
