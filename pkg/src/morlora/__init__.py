"""Mixture-of-Ranks adapters: shared low-rank factors specialised per expert
by diagonal scalings and mixed by an input-dependent router."""

from .adapters import (
    LoRALayer,
    MoELoRALayer,
    MoRLayer,
    RouterKind,
    balance_loss,
    init_lora,
    init_moelora,
    init_mor,
    lora_forward,
    moelora_forward,
    mor_expert_apply,
    mor_forward,
    mor_forward_stacked,
    router_weights,
)
from .grads import lora_backward, moelora_backward, mor_backward
from .matcore import SplitMix64, jacobi_svd, matmul, softmax_stable

__version__ = "0.1.0"
