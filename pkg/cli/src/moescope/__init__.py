"""
moescope: desk-scale mixture-of-experts transformers and routing analysis
"""

from .checkpoint import load_checkpoint, load_model, save_checkpoint
from .main import analyze, corpus_gen, trace, train_run
from .model import ModelConfig, MoETransformer
from .moe import RouterConfig
from .routing_trace import RoutingTrace, capture_trace
