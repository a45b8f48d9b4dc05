"""
Decoder-only transformer with rotary attention, SwiGLU feed-forward networks
and residual MoE blocks interleaved every `moe_every` layers.

Both block kinds use pre-LayerNorm:

    dense:         x' = MHA(LN(x)) + x          x = FFN(LN(x')) + x'
    residual_moe:  x' = MHA(LN(x)) + x          x = MoE(x'') + FFN(x'') + x'

where x'' = LN(x'). In a residual MoE block the fixed FFN is always active
and the MoE layer adds on top of it, so zeroing every expert's output
projection turns the block back into a dense one.

The MoE layers route every non-padding token of the batch as a single
routing group, scanning positions in ascending order (all sequences at
position 0, then position 1, and so on). A token can therefore only lose
capacity to tokens at earlier or equal positions, which keeps the model
causal.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import List

import numpy as np

from .config import (
    BYTE_VOCAB_SIZE,
    DEFAULT_W_BALANCE,
    DEFAULT_W_Z_LOGITS,
    DEFAULT_W_Z_ROUTER,
    FLOAT_DTYPE,
    IGNORE_INDEX,
    INIT_STD,
    LAYER_NORM_EPS,
    ROPE_BASE,
)
from .errors import ConfigError, ContractError, DimensionError
from .moe import ExpertParams, RouterConfig, moe_forward, swiglu
from .tensor import (
    Tensor,
    as_tensor,
    cross_entropy,
    embedding,
    layer_norm,
    logsumexp,
    matmul,
    scatter_rows,
    softmax,
    take_rows,
)

log = logging.getLogger(__name__)


class BlockKind(Enum):
    DENSE = "dense"
    RESIDUAL_MOE = "residual_moe"


@dataclass
class LossWeights:
    w_balance: float = DEFAULT_W_BALANCE
    w_z_logits: float = DEFAULT_W_Z_LOGITS
    w_z_router: float = DEFAULT_W_Z_ROUTER

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ConfigError(f"loss weight {name} must not be negative")


@dataclass
class ModelConfig:
    """
    Shape of the transformer. num_heads * head_dim must equal hidden, and
    head_dim must be even for the rotary embedding. Layer i (0-based) is a
    residual MoE block iff (i + 1) % moe_every == 0.
    """

    hidden: int
    ffn_hidden: int
    num_heads: int
    head_dim: int
    num_layers: int
    router: RouterConfig
    vocab_size: int = BYTE_VOCAB_SIZE
    moe_every: int = 2
    max_seq_len: int = 128
    loss_weights: LossWeights = field(default_factory=LossWeights)
    bidirectional_prefix: bool = False
    rope_base: float = ROPE_BASE

    def __post_init__(self):
        for name in (
            "hidden",
            "ffn_hidden",
            "num_heads",
            "head_dim",
            "num_layers",
            "vocab_size",
            "moe_every",
            "max_seq_len",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.num_heads * self.head_dim != self.hidden:
            raise ConfigError(
                f"num_heads * head_dim = {self.num_heads * self.head_dim}"
                f" does not equal hidden = {self.hidden}"
            )
        if self.head_dim % 2:
            raise ConfigError(
                f"rotary embedding needs an even head_dim, got {self.head_dim}"
            )

    def block_kind(self, layer_index):
        if (layer_index + 1) % self.moe_every == 0:
            return BlockKind.RESIDUAL_MOE
        return BlockKind.DENSE

    def moe_layer_indices(self):
        return [
            i
            for i in range(self.num_layers)
            if self.block_kind(i) is BlockKind.RESIDUAL_MOE
        ]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        values = dict(values)
        try:
            values["router"] = RouterConfig(**values["router"])
            values["loss_weights"] = LossWeights(
                **values.get("loss_weights", {})
            )
            return cls(**values)
        except (KeyError, TypeError) as err:
            raise ConfigError(f"invalid model config: {err}") from err


@dataclass
class LayerRouting:
    """Routing decisions of one MoE layer for one forward pass"""

    layer: int
    token_rows: np.ndarray  # flat b * T + t index of every routed token
    topk_idx: np.ndarray  # len(token_rows) x K
    kept: np.ndarray  # len(token_rows) x K
    probs: np.ndarray  # len(token_rows) x E
    capacity: int

    @property
    def drop_fraction(self):
        return 1.0 - self.kept.sum() / self.kept.size


@dataclass
class ModelOutput:
    logits: Tensor  # B x T x V
    aux: list  # BalanceLossTerms per MoE layer
    routing: List[LayerRouting]
    params: dict  # the parameter tensors this pass used

    @property
    def drop_fraction(self):
        if not self.routing:
            return 0.0
        dropped = sum(r.kept.size - r.kept.sum() for r in self.routing)
        total = sum(r.kept.size for r in self.routing)
        return float(dropped / total)


@dataclass
class LossBreakdown:
    total: Tensor
    ce: float
    balance: float
    z_logits: float
    z_router: float


def rope_apply(tensor, positions, base=ROPE_BASE):
    """
    Rotary position embedding. Every adjacent pair (2i, 2i+1) of the last
    axis is rotated by the angle position * base ** (-2i / head_dim).

    :param tensor: Tensor[B x T x N_Head x H_Head]
    :param positions: integer array [T] or [B x T]

    """
    tensor = as_tensor(tensor)
    head_dim = tensor.shape[-1]
    if head_dim % 2:
        raise ConfigError(
            f"rotary embedding needs an even head_dim, got {head_dim}"
        )
    positions = np.asarray(positions, dtype=FLOAT_DTYPE)
    if positions.shape[-1] != tensor.shape[1]:
        raise DimensionError(
            "positions must match the sequence axis",
            positions.shape,
            tensor.shape,
        )

    inv_freq = base ** (-np.arange(0, head_dim, 2) / head_dim)
    angles = positions[..., None] * inv_freq  # [B x] T x H_Head/2
    if angles.ndim == 2:
        angles = angles[None]
    cos = np.cos(angles)[:, :, None, :]
    sin = np.sin(angles)[:, :, None, :]

    even = tensor.data[..., 0::2]
    odd = tensor.data[..., 1::2]
    out = np.empty(
        np.broadcast_shapes(tensor.shape, cos.shape[:-1] + (head_dim,))
    )
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos

    if not tensor.requires_grad:
        return Tensor(out)

    def backward_fn(grad):
        # The transpose of a rotation is the rotation by the negative angle
        grad_even = grad[..., 0::2]
        grad_odd = grad[..., 1::2]
        grad_in = np.empty_like(grad)
        grad_in[..., 0::2] = grad_even * cos + grad_odd * sin
        grad_in[..., 1::2] = grad_odd * cos - grad_even * sin
        return (grad_in,)

    return tensor.tape.record(out, (tensor,), backward_fn)


def attention_mask(batch_size, seq_len, prefix_lengths=None):
    """
    Additive mask (0 or -inf) of shape B x 1 x T x T. Positions attend to
    themselves and to earlier positions; with prefix lengths given, the
    prefix positions of each sequence also see each other.
    """
    query = np.arange(seq_len)[:, None]
    key = np.arange(seq_len)[None, :]
    allowed = np.broadcast_to(key <= query, (batch_size, seq_len, seq_len))
    if prefix_lengths is not None:
        prefix = np.asarray(prefix_lengths)[:, None, None]
        allowed = allowed | ((query < prefix) & (key < prefix))
    return np.where(allowed, 0.0, -np.inf)[:, None, :, :]


def attention(x, params, positions, mask, num_heads, rope_base=ROPE_BASE):
    """
    Multi-head self-attention with rotary queries and keys.

    :param x: Tensor[B x T x H]
    :param params: dict holding attn.w_q, attn.w_k, attn.w_v, attn.w_o
    :param mask: additive mask broadcastable to B x N_Head x T x T

    """
    batch, seq_len, hidden = x.shape
    head_dim = hidden // num_heads

    def heads(weight, rotate):
        projected = matmul(x, weight).reshape(
            batch, seq_len, num_heads, head_dim
        )
        if rotate:
            projected = rope_apply(projected, positions, base=rope_base)
        return projected.transpose(0, 2, 1, 3)  # B x N x T x H_Head

    query = heads(params["attn.w_q"], True)
    key = heads(params["attn.w_k"], True)
    value = heads(params["attn.w_v"], False)

    scores = matmul(query, key.transpose(0, 1, 3, 2)) * (
        1.0 / math.sqrt(head_dim)
    )
    weights = softmax(scores + mask, axis=-1)
    mixed = matmul(weights, value).transpose(0, 2, 1, 3)
    return matmul(mixed.reshape(batch, seq_len, hidden), params["attn.w_o"])


def routing_order(valid):
    """
    Picks the tokens that take part in routing and the order capacity is
    granted in.

    :param valid: boolean B x T, False at padding
    :returns: (flat row indices of the valid tokens in b-major order,
        permutation of those rows sorting them by position then sequence)

    """
    valid = np.asarray(valid, dtype=bool)
    seq_len = valid.shape[1]
    rows = np.nonzero(valid.reshape(-1))[0]
    order = np.lexsort((rows // seq_len, rows % seq_len))
    return rows, order


def expert_params(params, num_experts):
    return [
        ExpertParams(
            params[f"moe.experts.{e}.w_gate"],
            params[f"moe.experts.{e}.w_up"],
            params[f"moe.experts.{e}.w_out"],
        )
        for e in range(num_experts)
    ]


def block_forward(
    x,
    kind,
    params,
    config,
    mask=None,
    routed_rows=None,
    order=None,
    layer_index=0,
):
    """
    One transformer block.

    :param x: Tensor[B x T x H]
    :param kind: BlockKind
    :param params: dict of this block's tensors, keyed without the
        "layers.<i>." prefix
    :param config: ModelConfig
    :param mask: additive attention mask; causal when omitted
    :param routed_rows: flat indices of the tokens the MoE layer routes
        (every token when omitted)
    :param order: capacity scan order over routed_rows (position-major
        when omitted)
    :returns: (x_out, BalanceLossTerms or None, LayerRouting or None)

    """
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[-1] != config.hidden:
        raise DimensionError("block input must be B x T x hidden", x.shape)
    batch, seq_len, hidden = x.shape
    if mask is None:
        mask = attention_mask(batch, seq_len)
    positions = np.arange(seq_len)

    normed = layer_norm(
        x, params["ln1.gain"], params["ln1.bias"], LAYER_NORM_EPS
    )
    x_attn = (
        attention(
            normed, params, positions, mask, config.num_heads, config.rope_base
        )
        + x
    )

    normed = layer_norm(
        x_attn, params["ln2.gain"], params["ln2.bias"], LAYER_NORM_EPS
    )
    ffn_out = swiglu(
        normed, params["ffn.w_gate"], params["ffn.w_up"], params["ffn.w_out"]
    )
    if kind is BlockKind.DENSE:
        return ffn_out + x_attn, None, None

    if routed_rows is None:
        routed_rows, order = routing_order(np.ones((batch, seq_len), bool))
    flat = normed.reshape(batch * seq_len, hidden)
    moe = moe_forward(
        take_rows(flat, routed_rows),
        expert_params(params, config.router.num_experts),
        params["moe.router"],
        config.router,
        order=order,
    )
    moe_out = scatter_rows(moe.y, routed_rows, batch * seq_len).reshape(
        batch, seq_len, hidden
    )
    routing = LayerRouting(
        layer=layer_index,
        token_rows=routed_rows,
        topk_idx=moe.router.topk_idx,
        kept=moe.router.kept,
        probs=moe.router.probs.data,
        capacity=moe.router.capacity,
    )
    return (moe_out + ffn_out) + x_attn, moe.aux, routing


def loss_components(logits, targets, aux, weights, ignore_index=IGNORE_INDEX):
    """
    Training objective: cross-entropy plus the weighted auxiliary losses.

        L = CE + w_balance * mean(L_b) + w_z_logits * z(output logits)
              + w_z_router * mean(router z)

    The MoE terms are averaged over the MoE layers; the output-logit z-loss
    is averaged over the non-ignored positions. Terms with weight zero are
    left out of the total, so that all-zero weights give CE exactly.

    :param logits: Tensor[B x T x V]
    :param targets: integer B x T with ignore_index on unsupervised positions
    :param aux: list of BalanceLossTerms, one per MoE layer
    :param weights: LossWeights
    :returns: LossBreakdown

    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    ce = cross_entropy(logits, targets, ignore_index)

    valid_rows = np.nonzero(targets.reshape(-1) != ignore_index)[0]
    flat = logits.reshape(-1, logits.shape[-1])
    lse = logsumexp(take_rows(flat, valid_rows), axis=-1)
    z_logits = (lse * lse).mean()

    balance = z_router = None
    if aux:
        balance, z_router = aux[0].balance_loss, aux[0].router_z_loss
        for layer_aux in aux[1:]:
            balance = balance + layer_aux.balance_loss
            z_router = z_router + layer_aux.router_z_loss
        balance = balance * (1.0 / len(aux))
        z_router = z_router * (1.0 / len(aux))

    total = ce
    if weights.w_balance and balance is not None:
        total = total + balance * weights.w_balance
    if weights.w_z_logits:
        total = total + z_logits * weights.w_z_logits
    if weights.w_z_router and z_router is not None:
        total = total + z_router * weights.w_z_router

    return LossBreakdown(
        total=total,
        ce=ce.item(),
        balance=balance.item() if balance is not None else 0.0,
        z_logits=z_logits.item(),
        z_router=z_router.item() if z_router is not None else 0.0,
    )


def total_loss(logits, targets, aux, weights, ignore_index=IGNORE_INDEX):
    """Scalar training loss; see loss_components"""
    return loss_components(logits, targets, aux, weights, ignore_index).total


def token_accuracy(logits, targets, ignore_index=IGNORE_INDEX):
    """Fraction of supervised positions where the argmax logit is the target"""
    logits = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    targets = np.asarray(targets)
    valid = targets != ignore_index
    if not valid.any():
        raise ContractError("every target position is ignored")
    predicted = logits.argmax(axis=-1)
    return float((predicted[valid] == targets[valid]).mean())


def unigram_accuracy(targets, ignore_index=IGNORE_INDEX):
    """
    Accuracy of always predicting the most frequent target token: the
    baseline a trained model should beat.
    """
    targets = np.asarray(targets)
    picked = targets[targets != ignore_index]
    if picked.size == 0:
        raise ContractError("every target position is ignored")
    counts = np.unique(picked, return_counts=True)[1]
    return float(counts.max() / picked.size)


def parameter_shapes(config):
    """Ordered {name: shape} of every parameter a ModelConfig implies"""
    hidden, ffn = config.hidden, config.ffn_hidden
    shapes = {"embed": (config.vocab_size, hidden)}
    for i in range(config.num_layers):
        prefix = f"layers.{i}."
        for norm in ("ln1", "ln2"):
            shapes[prefix + norm + ".gain"] = (hidden,)
            shapes[prefix + norm + ".bias"] = (hidden,)
        for proj in ("w_q", "w_k", "w_v", "w_o"):
            shapes[prefix + "attn." + proj] = (hidden, hidden)
        ffn_names = [prefix + "ffn."]
        if config.block_kind(i) is BlockKind.RESIDUAL_MOE:
            num_experts = config.router.num_experts
            shapes[prefix + "moe.router"] = (hidden, num_experts)
            ffn_names += [
                f"{prefix}moe.experts.{e}." for e in range(num_experts)
            ]
        for name in ffn_names:
            shapes[name + "w_gate"] = (hidden, ffn)
            shapes[name + "w_up"] = (hidden, ffn)
            shapes[name + "w_out"] = (ffn, hidden)
    shapes["final_ln.gain"] = (hidden,)
    shapes["final_ln.bias"] = (hidden,)
    shapes["lm_head"] = (hidden, config.vocab_size)
    return shapes


class MoETransformer:
    """
    The model: a ModelConfig plus an ordered dict of named float64 arrays.

    Parameter names:
        embed, lm_head, final_ln.{gain,bias},
        layers.<i>.{ln1,ln2}.{gain,bias},
        layers.<i>.attn.{w_q,w_k,w_v,w_o},
        layers.<i>.ffn.{w_gate,w_up,w_out},
        layers.<i>.moe.router, layers.<i>.moe.experts.<e>.{w_gate,w_up,w_out}
    """

    def __init__(self, config, params):
        self.config = config
        self.params = params
        expected = parameter_shapes(config)
        missing = set(expected) - set(params)
        if missing:
            raise ConfigError(
                f"missing parameters: {', '.join(sorted(missing))}"
            )
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise DimensionError(
                    f"parameter {name} has the wrong shape",
                    params[name].shape,
                    shape,
                )

    @classmethod
    def init(cls, config, seed=0):
        """
        Random initialization: projections of layer i are drawn from
        normal(0, 0.02 / sqrt(i + 1)); embeddings and the LM head from
        normal(0, 0.02). LayerNorm gains start at 1 and biases at 0.
        """
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in parameter_shapes(config).items():
            if name.endswith(".gain"):
                params[name] = np.ones(shape)
            elif name.endswith(".bias"):
                params[name] = np.zeros(shape)
            elif name.startswith("layers."):
                depth = int(name.split(".")[1]) + 1
                std = INIT_STD / math.sqrt(depth)
                params[name] = rng.normal(0.0, std, shape)
            else:
                params[name] = rng.normal(0.0, INIT_STD, shape)
        model = cls(config, params)
        log.debug(
            "initialized model with %d parameters", model.parameter_count()
        )
        return model

    def moe_layer_indices(self):
        return self.config.moe_layer_indices()

    def parameter_count(self):
        return int(sum(p.size for p in self.params.values()))

    def bind(self, tape=None):
        """Parameter tensors for one pass (leaves when a tape is given)"""
        if tape is None:
            return {name: Tensor(p) for name, p in self.params.items()}
        return {name: tape.watch(p, name) for name, p in self.params.items()}

    def forward(self, input_ids, tape=None, prefix_lengths=None, lengths=None):
        """
        :param input_ids: integer B x T (or T) token ids
        :param tape: Tape to record on; inference mode when omitted
        :param prefix_lengths: per-sequence prefix lengths, used only when
            config.bidirectional_prefix is set
        :param lengths: per-sequence number of non-padding tokens (padding
            sits at the end); all tokens are real when omitted
        :returns: ModelOutput

        """
        cfg = self.config
        ids = np.asarray(input_ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.ndim != 2 or ids.shape[1] < 1:
            raise DimensionError("input ids must be B x T", ids.shape)
        batch, seq_len = ids.shape
        if seq_len > cfg.max_seq_len:
            raise DimensionError(
                f"sequence length exceeds max_seq_len={cfg.max_seq_len}",
                ids.shape,
            )

        params = self.bind(tape)
        if cfg.bidirectional_prefix and prefix_lengths is not None:
            mask = attention_mask(batch, seq_len, prefix_lengths)
        else:
            mask = attention_mask(batch, seq_len)
        if lengths is None:
            valid = np.ones((batch, seq_len), dtype=bool)
        else:
            valid = np.arange(seq_len)[None, :] < np.asarray(lengths)[:, None]
        routed_rows, order = routing_order(valid)

        x = embedding(params["embed"], ids)
        aux, routing = [], []
        for i in range(cfg.num_layers):
            prefix = f"layers.{i}."
            layer = {
                name[len(prefix) :]: tensor
                for name, tensor in params.items()
                if name.startswith(prefix)
            }
            x, layer_aux, layer_routing = block_forward(
                x,
                cfg.block_kind(i),
                layer,
                cfg,
                mask=mask,
                routed_rows=routed_rows,
                order=order,
                layer_index=i,
            )
            if layer_aux is not None:
                aux.append(layer_aux)
                routing.append(layer_routing)

        x = layer_norm(
            x, params["final_ln.gain"], params["final_ln.bias"], LAYER_NORM_EPS
        )
        logits = matmul(x, params["lm_head"])
        return ModelOutput(
            logits=logits, aux=aux, routing=routing, params=params
        )
