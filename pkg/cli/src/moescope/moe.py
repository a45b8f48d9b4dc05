"""
The sparse Mixture-of-Experts layer.

A linear router scores every token against the E experts; softmax of those
scores gives the routing probabilities, and each token is dispatched to its
K most probable experts. The surviving probabilities are used as gates as they
are (no renormalization over the K picks):

    MoE(x) = sum over kept choices j of gate_j(x) * expert_j(x)

Each expert accepts at most C assignments per routing group. Assignments are
admitted in scan order (ascending position; within a token, its first choice
before its second) and anything past an expert's capacity is dropped: the
dropped choice contributes nothing to the sum above, although the token still
travels through the residual path around the layer.

Two auxiliary losses are produced alongside the output:
  - the load balance loss E * sum_i m_i * P_i (divided by K so balanced
    routing scores exactly 1), where m_i is the fraction of tokens whose
    top-K choices include expert i (before any dropping, and constant with
    respect to gradients) and P_i is the batch-mean router probability of
    expert i, which is what carries the gradient;
  - the router z-loss, the batch mean of squared log-sum-exp router logits.
"""

import math
from dataclasses import dataclass
from typing import List, NamedTuple, Optional

import numpy as np

from .config import DEFAULT_CAPACITY_FACTOR, DEFAULT_TOP_K
from .errors import ConfigError, ContractError, DimensionError
from .tensor import (
    Tensor,
    as_tensor,
    gather,
    logsumexp,
    matmul,
    scatter_rows,
    silu,
    softmax,
    take_rows,
    topk_indices,
)

DROP_POLICIES = ("position_priority",)


@dataclass
class RouterConfig:
    """
    Routing hyper-parameters. Expert capacity for a routing group of B tokens
    is ceil(capacity_factor * B * K / E), never below K, unless
    expert_capacity pins it to a fixed value.
    """

    num_experts: int
    top_k: int = DEFAULT_TOP_K
    capacity_factor: float = DEFAULT_CAPACITY_FACTOR
    drop_policy: str = "position_priority"
    expert_capacity: Optional[int] = None

    def __post_init__(self):
        if self.num_experts < 1:
            raise ConfigError("num_experts must be positive")
        if self.top_k < 1:
            raise ConfigError("top_k must be positive")
        if self.top_k > self.num_experts:
            raise ConfigError(
                f"top_k={self.top_k} exceeds num_experts={self.num_experts}"
            )
        if self.capacity_factor <= 0:
            raise ConfigError("capacity_factor must be positive")
        if self.drop_policy not in DROP_POLICIES:
            raise ConfigError(
                f"unknown drop_policy {self.drop_policy!r}; expected one of"
                f" {', '.join(DROP_POLICIES)}"
            )
        if self.expert_capacity is not None and (
            self.expert_capacity < self.top_k
        ):
            raise ConfigError("expert_capacity must be at least top_k")

    def capacity(self, num_tokens):
        """
        Maximum number of kept assignments per expert for a routing group.

        :param num_tokens: tokens B in the routing group

        """
        if self.expert_capacity is not None:
            return self.expert_capacity
        raw = (
            self.capacity_factor * num_tokens * self.top_k / self.num_experts
        )
        # Shave float noise so that e.g. 2.0000000000000004 stays 2
        return max(self.top_k, math.ceil(raw - 1e-9))


@dataclass
class RouterOutput:
    """Routing decisions for one group of B tokens"""

    logits: Tensor  # B x E
    probs: Tensor  # B x E, softmax of logits
    topk_idx: np.ndarray  # B x K, best expert first
    gate_vals: np.ndarray  # B x K, probs at topk_idx
    kept: np.ndarray  # B x K booleans
    capacity: int

    @property
    def num_assignments(self):
        return self.kept.size

    @property
    def num_dropped(self):
        return int(self.kept.size - self.kept.sum())

    @property
    def drop_fraction(self):
        return self.num_dropped / self.kept.size

    def kept_per_expert(self):
        """Number of kept assignments each expert received"""
        return np.bincount(
            self.topk_idx[self.kept], minlength=self.probs.shape[-1]
        )


@dataclass
class BalanceLossTerms:
    """Auxiliary loss ingredients for one MoE layer call"""

    m: np.ndarray  # fraction of tokens dispatched to each expert (pre-drop)
    p_mean: np.ndarray  # batch-mean router probability per expert
    balance_loss: Tensor  # scalar
    router_z_loss: Tensor  # scalar


class RoutingRecord(NamedTuple):
    """One token's routing outcome: ranked experts and whether each was kept"""

    token: int
    experts: tuple
    kept: tuple


class ExpertParams(NamedTuple):
    """SwiGLU FFN weights of one expert (also used for the fixed FFN)"""

    w_gate: Tensor  # D x F
    w_up: Tensor  # D x F
    w_out: Tensor  # F x D


@dataclass
class MoEOutput:
    y: Tensor
    aux: BalanceLossTerms
    records: List[RoutingRecord]
    router: RouterOutput


def swiglu(x, w_gate, w_up, w_out):
    """
    SwiGLU feed-forward network without biases:
    W_out(swish(x W_gate) * (x W_up)).
    """
    return matmul(silu(matmul(x, w_gate)) * matmul(x, w_up), w_out)


def apply_capacity(topk_idx, cfg, order=None, capacity=None):
    """
    Decides which assignments each expert keeps. Tokens are scanned in the
    given order (ascending row order by default); within a token, choice
    rank 0 is considered before rank 1. An assignment is kept iff its expert
    has fewer than C kept assignments so far.

    :param topk_idx: integer matrix B x K of expert ids in [0, E)
    :param cfg: RouterConfig
    :param order: optional permutation of range(B) giving the scan order
    :param capacity: optional C; defaults to cfg.capacity(B)
    :returns: boolean matrix B x K

    """
    topk_idx = np.asarray(topk_idx, dtype=np.int64)
    num_tokens, top_k = topk_idx.shape
    if capacity is None:
        capacity = cfg.capacity(num_tokens)
    if order is None:
        order = np.arange(num_tokens)
    else:
        order = np.asarray(order, dtype=np.int64)
        if sorted(order.tolist()) != list(range(num_tokens)):
            raise ContractError("scan order must be a permutation of tokens")

    scan = topk_idx[order].reshape(-1)
    one_hot = scan[:, None] == np.arange(cfg.num_experts)[None, :]
    # How many earlier assignments in the scan went to the same expert
    earlier = np.cumsum(one_hot, axis=0)[np.arange(scan.size), scan] - 1

    kept = np.empty((num_tokens, top_k), dtype=bool)
    kept[order] = (earlier < capacity).reshape(num_tokens, top_k)
    return kept


def route(x, router_weights, cfg, order=None):
    """
    Computes router probabilities, the top-K choices and their capacity
    outcome for a routing group.

    :param x: Tensor[B x D]
    :param router_weights: Tensor[D x E]
    :param cfg: RouterConfig
    :param order: optional scan order handed to apply_capacity

    """
    x = as_tensor(x)
    router_weights = as_tensor(router_weights)
    if cfg.top_k > cfg.num_experts:
        raise ConfigError(
            f"top_k={cfg.top_k} exceeds num_experts={cfg.num_experts}"
        )
    if x.ndim != 2 or x.shape[0] < 1:
        raise DimensionError("route expects a non-empty B x D input", x.shape)
    if router_weights.shape != (x.shape[1], cfg.num_experts):
        raise DimensionError(
            "router weights must be D x E", x.shape, router_weights.shape
        )

    logits = matmul(x, router_weights)
    probs = softmax(logits)
    # Ranking the logits ranks the probabilities (softmax is monotone).
    topk_idx = topk_indices(logits, cfg.top_k)
    gate_vals = np.take_along_axis(probs.data, topk_idx, axis=-1)
    capacity = cfg.capacity(x.shape[0])
    kept = apply_capacity(topk_idx, cfg, order=order, capacity=capacity)
    return RouterOutput(
        logits=logits,
        probs=probs,
        topk_idx=topk_idx,
        gate_vals=gate_vals,
        kept=kept,
        capacity=capacity,
    )


def dispatch_fractions(topk_idx, num_experts):
    """
    m_i: fraction of the B tokens whose top-K choices include expert i.
    Counts pre-drop assignments, so the entries sum to K.
    """
    topk_idx = np.asarray(topk_idx)
    counts = np.bincount(topk_idx.reshape(-1), minlength=num_experts)
    return counts / topk_idx.shape[0]


def balance_loss(probs, topk_idx, top_k):
    """
    Load balance loss E * sum_i m_i * P_i / K. Differentiable through probs
    only; m is a constant.

    :param probs: Tensor[B x E] router probabilities
    :param topk_idx: integer matrix B x K
    :param top_k: K

    """
    probs = as_tensor(probs)
    num_experts = probs.shape[-1]
    m = dispatch_fractions(topk_idx, num_experts)
    p_mean = probs.mean(axis=0)
    return (p_mean * m).sum() * (num_experts / top_k)


def router_z_loss(logits):
    """
    Mean over tokens of the squared log-sum-exp of the router logits.

    :param logits: Tensor[B x E]

    """
    lse = logsumexp(as_tensor(logits), axis=-1)
    return (lse * lse).mean()


def moe_forward(x, experts, router_weights, cfg, order=None):
    """
    Runs one MoE layer on a routing group.

    :param x: Tensor[B x D]
    :param experts: sequence of E ExpertParams (or (w_gate, w_up, w_out))
    :param router_weights: Tensor[D x E]
    :param cfg: RouterConfig
    :param order: optional scan order for capacity (see apply_capacity)
    :returns: MoEOutput with y (B x D), the auxiliary loss terms, one
        RoutingRecord per token and the RouterOutput

    """
    x = as_tensor(x)
    if len(experts) != cfg.num_experts:
        raise ConfigError(
            f"got {len(experts)} experts for num_experts={cfg.num_experts}"
        )
    router = route(x, router_weights, cfg, order=order)
    num_tokens, width = x.shape
    load = router.kept_per_expert()
    if load.max() > router.capacity:
        raise ContractError(
            f"expert {int(load.argmax())} kept {int(load.max())} assignments"
            f" over capacity {router.capacity}"
        )

    parts = []
    for expert_id, expert in enumerate(experts):
        expert = ExpertParams(*(as_tensor(w) for w in expert))
        if expert.w_gate.shape[0] != width or expert.w_out.shape[-1] != width:
            raise DimensionError(
                f"expert {expert_id} does not map width {width} to itself",
                expert.w_gate.shape,
                expert.w_out.shape,
            )
        chosen = (router.topk_idx == expert_id) & router.kept
        rows = np.nonzero(chosen.any(axis=1))[0]
        if rows.size == 0:
            continue
        hidden = swiglu(take_rows(x, rows), *expert)
        gates = gather(router.probs, rows, np.full(rows.size, expert_id))
        parts.append(
            scatter_rows(hidden * gates.reshape(-1, 1), rows, num_tokens)
        )

    if parts:
        y = parts[0]
        for part in parts[1:]:
            y = y + part
    else:
        y = Tensor(np.zeros((num_tokens, width)))

    aux = BalanceLossTerms(
        m=dispatch_fractions(router.topk_idx, cfg.num_experts),
        p_mean=router.probs.data.mean(axis=0),
        balance_loss=balance_loss(router.probs, router.topk_idx, cfg.top_k),
        router_z_loss=router_z_loss(router.logits),
    )
    records = [
        RoutingRecord(
            token,
            tuple(int(e) for e in router.topk_idx[token]),
            tuple(bool(k) for k in router.kept[token]),
        )
        for token in range(num_tokens)
    ]
    return MoEOutput(y=y, aux=aux, records=records, router=router)
