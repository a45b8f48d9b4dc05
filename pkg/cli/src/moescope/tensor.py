"""
Defines the Tensor and Tape classes: dense 64-bit arrays with reverse-mode
automatic differentiation, enough to train the toy MoE transformer and to
check every analytic gradient against finite differences.

How it works:
A Tape is created for one forward pass. Parameters are put on it with
Tape.watch(), which returns leaf tensors. Every operation whose inputs live
on a tape appends one node to it, holding its parents and a closure that maps
the output gradient to the parents' gradients. Because nodes are appended in
the order they are computed, the tape is already topologically sorted, and
backward() simply walks it in reverse, visiting each node once. Constants
(plain Tensor(...) objects, numpy arrays and Python numbers) never receive a
gradient.

Once backward() has run the tape is closed; build a new one for the next
forward pass.

All data is stored as numpy float64 arrays. Index arguments (token ids,
expert ids) are plain numpy integer arrays.
"""

import numpy as np

from .config import FLOAT_DTYPE, IGNORE_INDEX
from .errors import ContractError, DimensionError, NumericError


def unbroadcast(grad, shape):
    """
    Sums grad over the axes numpy broadcasting added or stretched, so that
    the result has the given shape.

    :param grad: gradient with the broadcast (output) shape
    :param shape: shape of the operand the gradient flows to

    """
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class _Node:
    """One recorded operation (or a leaf, when backward_fn is None)"""

    __slots__ = ("parents", "backward_fn")

    def __init__(self, parents, backward_fn):
        self.parents = parents
        self.backward_fn = backward_fn


class Tape:
    """
    Ordered record of the operations of one forward pass. Parents always
    precede their children, so a reverse walk is a valid backward order.
    """

    def __init__(self):
        self.nodes = []
        self.leaves = {}
        self.closed = False

    def __len__(self):
        return len(self.nodes)

    def _check_open(self):
        if self.closed:
            raise ContractError("tape was already used for a backward pass")

    def _append(self, data, parents, backward_fn):
        self._check_open()
        out = Tensor(data)
        out.requires_grad = True
        out.tape = self
        out.node_id = len(self.nodes)
        self.nodes.append(_Node(tuple(parents), backward_fn))
        return out

    def watch(self, data, name=None):
        """
        Puts an array on the tape as a leaf that receives a gradient.

        :param data: array-like (a float64 array is used without copying)
        :param name: optional label, handy when reporting gradients

        """
        leaf = self._append(data, (), None)
        leaf.name = name
        self.leaves[leaf.node_id] = leaf
        return leaf

    def record(self, data, parents, backward_fn):
        """
        Registers the result of a custom operation.

        :param data: the forward result
        :param parents: tuple of Tensor inputs
        :param backward_fn: maps the output gradient to a tuple holding one
            gradient per parent (None where no gradient is needed)

        """
        return self._append(data, parents, backward_fn)

    def backward(self, loss):
        """
        Back-propagates from a scalar loss. Gradients are accumulated
        additively across fan-out. Returns {node_id: gradient} for every leaf
        reached, and also stores each leaf's gradient on its .grad.

        :param loss: scalar Tensor recorded on this tape

        """
        if loss.tape is not self:
            raise ContractError("loss is not recorded on this tape")
        if loss.data.size != 1:
            raise ContractError(
                f"backward needs a scalar loss, got shape {loss.shape}"
            )
        self._check_open()

        grads = {loss.node_id: np.ones_like(loss.data)}
        leaf_grads = {}
        for node_id in range(loss.node_id, -1, -1):
            grad = grads.pop(node_id, None)
            if grad is None:
                continue
            node = self.nodes[node_id]
            if node.backward_fn is None:
                leaf_grads[node_id] = np.array(grad, dtype=FLOAT_DTYPE)
                continue
            for parent, parent_grad in zip(
                node.parents, node.backward_fn(grad)
            ):
                if parent_grad is None or not parent.requires_grad:
                    continue
                if parent.node_id in grads:
                    grads[parent.node_id] = (
                        grads[parent.node_id] + parent_grad
                    )
                else:
                    grads[parent.node_id] = parent_grad

        for node_id, grad in leaf_grads.items():
            self.leaves[node_id].grad = grad
        self.closed = True
        return leaf_grads


class Tensor:
    """
    A dense float64 array. Tensors built directly are constants; tensors that
    take part in differentiation come from Tape.watch() or from operations on
    such tensors.
    """

    # Let numpy defer to our reflected operators (ndarray + Tensor).
    __array_priority__ = 100

    def __init__(self, data):
        self.data = np.asarray(data, dtype=FLOAT_DTYPE)
        self.requires_grad = False
        self.tape = None
        self.node_id = None
        self.grad = None
        self.name = None

    def __repr__(self):
        grad_note = f", node={self.node_id}" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad_note})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(value):
    """Wraps arrays and numbers as constant tensors; tensors pass through"""
    return value if isinstance(value, Tensor) else Tensor(value)


def _tape_of(tensors):
    tape = None
    for tensor in tensors:
        if not tensor.requires_grad:
            continue
        if tape is None:
            tape = tensor.tape
        elif tensor.tape is not tape:
            raise ContractError("operands are recorded on different tapes")
    return tape


def _result(data, parents, backward_fn):
    tape = _tape_of(parents)
    if tape is None:
        return Tensor(data)
    return tape.record(data, parents, backward_fn)


def backward(loss):
    """
    Runs the backward pass of the tape loss was recorded on and returns the
    gradient map {node_id: gradient} of its leaves.

    :param loss: a scalar Tensor

    """
    if not isinstance(loss, Tensor) or loss.tape is None:
        raise ContractError("loss is not recorded on any tape")
    return loss.tape.backward(loss)


# Elementwise arithmetic


def _check_broadcast(first, second, op_name):
    try:
        return np.broadcast_shapes(first.shape, second.shape)
    except ValueError as err:
        raise DimensionError(
            f"cannot broadcast operands of {op_name}",
            first.shape,
            second.shape,
        ) from err


def add(first, second):
    first, second = as_tensor(first), as_tensor(second)
    _check_broadcast(first, second, "add")

    def backward_fn(grad):
        return (
            unbroadcast(grad, first.shape),
            unbroadcast(grad, second.shape),
        )

    return _result(first.data + second.data, (first, second), backward_fn)


def sub(first, second):
    first, second = as_tensor(first), as_tensor(second)
    _check_broadcast(first, second, "sub")

    def backward_fn(grad):
        return (
            unbroadcast(grad, first.shape),
            unbroadcast(-grad, second.shape),
        )

    return _result(first.data - second.data, (first, second), backward_fn)


def mul(first, second):
    first, second = as_tensor(first), as_tensor(second)
    _check_broadcast(first, second, "mul")

    def backward_fn(grad):
        return (
            unbroadcast(grad * second.data, first.shape),
            unbroadcast(grad * first.data, second.shape),
        )

    return _result(first.data * second.data, (first, second), backward_fn)


def div(first, second):
    first, second = as_tensor(first), as_tensor(second)
    _check_broadcast(first, second, "div")

    def backward_fn(grad):
        return (
            unbroadcast(grad / second.data, first.shape),
            unbroadcast(
                -grad * first.data / (second.data * second.data),
                second.shape,
            ),
        )

    return _result(first.data / second.data, (first, second), backward_fn)


def neg(tensor):
    tensor = as_tensor(tensor)
    return _result(-tensor.data, (tensor,), lambda grad: (-grad,))


def power(tensor, exponent):
    """Raises to a constant (Python number) exponent"""
    tensor = as_tensor(tensor)

    def backward_fn(grad):
        return (grad * exponent * tensor.data ** (exponent - 1),)

    return _result(tensor.data**exponent, (tensor,), backward_fn)


def exp(tensor):
    tensor = as_tensor(tensor)
    out = np.exp(tensor.data)
    return _result(out, (tensor,), lambda grad: (grad * out,))


def log(tensor):
    tensor = as_tensor(tensor)
    return _result(
        np.log(tensor.data), (tensor,), lambda grad: (grad / tensor.data,)
    )


def _sigmoid(values):
    # Split by sign so neither branch overflows
    out = np.empty_like(values)
    positive = values >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-values[positive]))
    exp_values = np.exp(values[~positive])
    out[~positive] = exp_values / (1.0 + exp_values)
    return out


def sigmoid(tensor):
    tensor = as_tensor(tensor)
    out = _sigmoid(tensor.data)
    return _result(
        out, (tensor,), lambda grad: (grad * out * (1.0 - out),)
    )


def silu(tensor):
    """Swish activation x * sigmoid(x), as used inside SwiGLU"""
    tensor = as_tensor(tensor)
    gate = _sigmoid(tensor.data)

    def backward_fn(grad):
        return (grad * (gate + tensor.data * gate * (1.0 - gate)),)

    return _result(tensor.data * gate, (tensor,), backward_fn)


# Reductions and shape changes


def _expand_reduced(grad, shape, axis, keepdims):
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        for ax in sorted(axes):
            grad = np.expand_dims(grad, ax)
    return np.broadcast_to(grad, shape)


def tensor_sum(tensor, axis=None, keepdims=False):
    tensor = as_tensor(tensor)

    def backward_fn(grad):
        return (_expand_reduced(grad, tensor.shape, axis, keepdims),)

    return _result(
        tensor.data.sum(axis=axis, keepdims=keepdims), (tensor,), backward_fn
    )


def mean(tensor, axis=None, keepdims=False):
    tensor = as_tensor(tensor)
    if axis is None:
        count = tensor.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([tensor.shape[a] for a in axes]))
    return tensor_sum(tensor, axis=axis, keepdims=keepdims) / float(count)


def reshape(tensor, shape):
    tensor = as_tensor(tensor)
    try:
        out = tensor.data.reshape(shape)
    except ValueError as err:
        raise DimensionError(
            "cannot reshape", tensor.shape, tuple(shape)
        ) from err
    return _result(
        out, (tensor,), lambda grad: (grad.reshape(tensor.shape),)
    )


def transpose(tensor, axes):
    tensor = as_tensor(tensor)
    inverse = tuple(np.argsort(axes))
    return _result(
        tensor.data.transpose(axes),
        (tensor,),
        lambda grad: (grad.transpose(inverse),),
    )


# Linear algebra


def matmul(first, second):
    """
    Matrix product over the last two axes; leading axes broadcast as in
    numpy.matmul.

    :param first: Tensor[..., m, k]
    :param second: Tensor[..., k, n]

    """
    first, second = as_tensor(first), as_tensor(second)
    if first.ndim < 2 or second.ndim < 2:
        raise DimensionError(
            "matmul needs at least 2-d operands", first.shape, second.shape
        )
    if first.shape[-1] != second.shape[-2]:
        raise DimensionError(
            "matmul inner dimensions disagree", first.shape, second.shape
        )
    try:
        np.broadcast_shapes(first.shape[:-2], second.shape[:-2])
    except ValueError as err:
        raise DimensionError(
            "matmul batch dimensions disagree", first.shape, second.shape
        ) from err

    def backward_fn(grad):
        return (
            unbroadcast(grad @ np.swapaxes(second.data, -1, -2), first.shape),
            unbroadcast(np.swapaxes(first.data, -1, -2) @ grad, second.shape),
        )

    return _result(first.data @ second.data, (first, second), backward_fn)


# Normalizations


def softmax(tensor, axis=-1):
    """
    Numerically stable softmax (max subtraction). Entries equal to -inf get
    probability zero, which is how attention masks are applied; NaN entries
    are rejected.

    """
    tensor = as_tensor(tensor)
    if np.isnan(tensor.data).any():
        raise NumericError("softmax input contains NaN")
    shifted = tensor.data - tensor.data.max(axis=axis, keepdims=True)
    exps = np.exp(shifted)
    out = exps / exps.sum(axis=axis, keepdims=True)

    def backward_fn(grad):
        return (out * (grad - (grad * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (tensor,), backward_fn)


def logsumexp(tensor, axis=-1):
    """Stable log(sum(exp(x))) over one axis (the axis is removed)"""
    tensor = as_tensor(tensor)
    if np.isnan(tensor.data).any():
        raise NumericError("logsumexp input contains NaN")
    peak = tensor.data.max(axis=axis, keepdims=True)
    exps = np.exp(tensor.data - peak)
    total = exps.sum(axis=axis, keepdims=True)
    out = np.squeeze(peak + np.log(total), axis=axis)
    probs = exps / total

    def backward_fn(grad):
        return (np.expand_dims(grad, axis) * probs,)

    return _result(out, (tensor,), backward_fn)


def layer_norm(tensor, gain, bias, eps=1e-5):
    """
    Layer normalization over the last axis with a learned gain and bias.

    :param tensor: Tensor[..., n]
    :param gain: Tensor[n]
    :param bias: Tensor[n]

    """
    tensor, gain, bias = as_tensor(tensor), as_tensor(gain), as_tensor(bias)
    width = tensor.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise DimensionError(
            "layer_norm parameters must match the last axis",
            tensor.shape,
            gain.shape,
        )
    centred = tensor.data - tensor.data.mean(axis=-1, keepdims=True)
    variance = (centred * centred).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(variance + eps)
    normed = centred * inv_std

    def backward_fn(grad):
        grad_normed = grad * gain.data
        grad_input = (inv_std / width) * (
            width * grad_normed
            - grad_normed.sum(axis=-1, keepdims=True)
            - normed * (grad_normed * normed).sum(axis=-1, keepdims=True)
        )
        grad_gain = (grad * normed).reshape(-1, width).sum(axis=0)
        grad_bias = grad.reshape(-1, width).sum(axis=0)
        return grad_input, grad_gain, grad_bias

    return _result(
        normed * gain.data + bias.data, (tensor, gain, bias), backward_fn
    )


# Indexing


def _check_index(index, limit, what):
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= limit):
        raise DimensionError(
            f"{what} index out of range [0, {limit})", index.shape
        )
    return index


def take_rows(tensor, index):
    """
    Selects rows (entries of the first axis); repeated indices are allowed
    and their gradients add up. This is the embedding lookup.

    :param tensor: Tensor[N, ...]
    :param index: integer array of any shape with values in [0, N)

    """
    tensor = as_tensor(tensor)
    index = _check_index(index, tensor.shape[0], "row")

    def backward_fn(grad):
        full = np.zeros_like(tensor.data)
        np.add.at(full, index, grad)
        return (full,)

    return _result(tensor.data[index], (tensor,), backward_fn)


def embedding(weight, ids):
    """Embedding lookup weight[ids] with scatter-add gradient"""
    return take_rows(weight, ids)


def scatter_rows(tensor, index, num_rows):
    """
    Adds the rows of tensor into a zero array of num_rows rows at the given
    row indices (the inverse of take_rows).

    :param tensor: Tensor[M, ...]
    :param index: integer array of length M
    :param num_rows: rows of the result

    """
    tensor = as_tensor(tensor)
    index = _check_index(index, num_rows, "row")
    if index.shape != tensor.shape[:1]:
        raise DimensionError(
            "scatter_rows index must match the first axis",
            index.shape,
            tensor.shape,
        )
    out = np.zeros((num_rows,) + tensor.shape[1:], dtype=FLOAT_DTYPE)
    np.add.at(out, index, tensor.data)
    return _result(out, (tensor,), lambda grad: (grad[index],))


def gather(tensor, rows, cols):
    """
    Picks tensor[rows[i], cols[i]] for every i (a 1-d result).

    :param tensor: Tensor[N, M]

    """
    tensor = as_tensor(tensor)
    rows = _check_index(rows, tensor.shape[0], "row")
    cols = _check_index(cols, tensor.shape[1], "column")

    def backward_fn(grad):
        full = np.zeros_like(tensor.data)
        np.add.at(full, (rows, cols), grad)
        return (full,)

    return _result(tensor.data[rows, cols], (tensor,), backward_fn)


def topk_indices(values, k):
    """
    Indices of the k largest entries along the last axis, largest first.
    Ties go to the lowest index. Not differentiable (returns integers).

    :param values: Tensor or array [..., E]
    :param k: number of indices to keep, 1 <= k <= E

    """
    values = values.data if isinstance(values, Tensor) else np.asarray(values)
    if not 1 <= k <= values.shape[-1]:
        raise ContractError(
            f"top-k needs 1 <= k <= {values.shape[-1]}, got k={k}"
        )
    # A stable sort of the negated values keeps equal entries in index
    # order.
    return np.argsort(-values, axis=-1, kind="stable")[..., :k]


# Losses


def cross_entropy(logits, targets, ignore_index=IGNORE_INDEX):
    """
    Mean cross-entropy of integer targets under softmax(logits), averaged
    over the positions whose target is not ignore_index.

    :param logits: Tensor[..., V]
    :param targets: integer array with the leading shape of logits

    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(
            "targets must match the leading logits axes",
            targets.shape,
            logits.shape,
        )
    if np.isnan(logits.data).any():
        raise NumericError("cross_entropy logits contain NaN")
    vocab = logits.shape[-1]
    flat_logits = logits.data.reshape(-1, vocab)
    flat_targets = targets.reshape(-1)
    valid = flat_targets != ignore_index
    count = int(valid.sum())
    if count == 0:
        raise ContractError("every target position is ignored")
    rows = np.nonzero(valid)[0]
    picked = flat_targets[rows]
    if picked.min() < 0 or picked.max() >= vocab:
        raise DimensionError(
            f"target id out of range [0, {vocab})", targets.shape
        )

    shifted = flat_logits - flat_logits.max(axis=-1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    loss = -log_probs[rows, picked].sum() / count

    def backward_fn(grad):
        probs = np.exp(log_probs)
        probs[~valid] = 0.0
        probs[rows, picked] -= 1.0
        return ((grad / count) * probs.reshape(logits.shape),)

    return _result(np.asarray(loss), (logits,), backward_fn)
