"""Minimal reverse-mode autodiff over numpy arrays.

Just enough machinery to train the attention projections, the target
predictor and the fusion network: dense layers, valid/padded 2-D
convolution, relu, logistic, softmax cross-entropy, and plain SGD.
Values are float64 throughout; every recorded op stores a closure that
routes the output gradient back to its parents.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .formats import canonical_dumps, parse_json_no_duplicates


class Var:
    """A node in the recorded computation: an array value plus backward hook."""

    __slots__ = ("value", "grad", "_parents", "_backward")

    def __init__(self, value, parents=(), backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape})"


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _accum(var: Var, grad: np.ndarray) -> None:
    if var.grad is None:
        var.grad = np.zeros_like(var.value)
    var.grad += grad


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = Var(a.value + b.value, (a, b))

    def back():
        _accum(a, _unbroadcast(out.grad, a.value.shape))
        _accum(b, _unbroadcast(out.grad, b.value.shape))

    out._backward = back
    return out


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = Var(a.value * b.value, (a, b))

    def back():
        _accum(a, _unbroadcast(out.grad * b.value, a.value.shape))
        _accum(b, _unbroadcast(out.grad * a.value, b.value.shape))

    out._backward = back
    return out


def scale(a, c: float) -> Var:
    a = as_var(a)
    out = Var(a.value * c, (a,))

    def back():
        _accum(a, out.grad * c)

    out._backward = back
    return out


def sub(a, b) -> Var:
    return add(a, scale(b, -1.0))


def matvec(w, x) -> Var:
    """(m, n) @ (n,) -> (m,)."""
    w, x = as_var(w), as_var(x)
    out = Var(w.value @ x.value, (w, x))

    def back():
        _accum(w, np.outer(out.grad, x.value))
        _accum(x, w.value.T @ out.grad)

    out._backward = back
    return out


def dot(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = Var(np.dot(a.value, b.value), (a, b))

    def back():
        _accum(a, out.grad * b.value)
        _accum(b, out.grad * a.value)

    out._backward = back
    return out


def matmat(a, b) -> Var:
    """(m, k) @ (k, n) -> (m, n)."""
    a, b = as_var(a), as_var(b)
    out = Var(a.value @ b.value, (a, b))

    def back():
        _accum(a, out.grad @ b.value.T)
        _accum(b, a.value.T @ out.grad)

    out._backward = back
    return out


def transpose(a) -> Var:
    a = as_var(a)
    out = Var(a.value.T, (a,))

    def back():
        _accum(a, out.grad.T)

    out._backward = back
    return out


def relu(a) -> Var:
    a = as_var(a)
    out = Var(np.maximum(a.value, 0.0), (a,))

    def back():
        _accum(a, out.grad * (a.value > 0.0))

    out._backward = back
    return out


def logistic(a) -> Var:
    a = as_var(a)
    val = 1.0 / (1.0 + np.exp(-a.value))
    out = Var(val, (a,))

    def back():
        _accum(a, out.grad * val * (1.0 - val))

    out._backward = back
    return out


def softmax(a) -> Var:
    """Softmax over a 1-D vector, computed with max-subtraction."""
    a = as_var(a)
    shifted = a.value - np.max(a.value)
    exp = np.exp(shifted)
    s = exp / exp.sum()
    out = Var(s, (a,))

    def back():
        g = out.grad
        _accum(a, s * (g - np.dot(g, s)))

    out._backward = back
    return out


def log_softmax(a) -> Var:
    a = as_var(a)
    shifted = a.value - np.max(a.value)
    lse = math.log(np.exp(shifted).sum())
    ls = shifted - lse
    out = Var(ls, (a,))

    def back():
        g = out.grad
        _accum(a, g - np.exp(ls) * g.sum())

    out._backward = back
    return out


def pick(a, index: int) -> Var:
    """Select one element of a 1-D vector as a scalar."""
    a = as_var(a)
    out = Var(a.value[index], (a,))

    def back():
        g = np.zeros_like(a.value)
        g[index] = out.grad
        _accum(a, g)

    out._backward = back
    return out


def softmax_cross_entropy(logits, label_index: int) -> Var:
    """Scalar loss ``-log softmax(logits)[label]`` over a flat logit vector."""
    return scale(pick(log_softmax(logits), label_index), -1.0)


def reshape(a, shape) -> Var:
    a = as_var(a)
    out = Var(a.value.reshape(shape), (a,))

    def back():
        _accum(a, out.grad.reshape(a.value.shape))

    out._backward = back
    return out


def flatten(a) -> Var:
    return reshape(a, (-1,))


def concat(parts) -> Var:
    """Concatenate along the first axis (vectors or channel stacks)."""
    parts = [as_var(p) for p in parts]
    out = Var(np.concatenate([p.value for p in parts], axis=0), tuple(parts))
    sizes = [p.value.shape[0] for p in parts]

    def back():
        offset = 0
        for p, n in zip(parts, sizes):
            _accum(p, out.grad[offset:offset + n])
            offset += n

    out._backward = back
    return out


def mean(a) -> Var:
    a = as_var(a)
    out = Var(a.value.mean(), (a,))

    def back():
        _accum(a, np.full_like(a.value, out.grad / a.value.size))

    out._backward = back
    return out


def _sliding_cols(xp: np.ndarray, kh: int, kw: int, stride: int):
    view = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    view = view[:, ::stride, ::stride, :, :]          # (C, Ho, Wo, kh, kw)
    c, ho, wo = view.shape[:3]
    cols = view.transpose(0, 3, 4, 1, 2).reshape(c * kh * kw, ho * wo)
    return np.ascontiguousarray(cols), ho, wo


def conv2d(x, kernel, bias, stride: int = 1, padding: int = 0) -> Var:
    """Cross-correlation of (C, H, W) input with an (O, C, kh, kw) kernel.

    Zero padding; output is (O, Ho, Wo).  padding=0 is the valid
    convolution used by encoders; the target predictor passes symmetric
    padding to keep the spatial size.
    """
    x, kernel, bias = as_var(x), as_var(kernel), as_var(bias)
    o, c, kh, kw = kernel.value.shape
    if x.value.ndim != 3 or x.value.shape[0] != c:
        raise ValueError(f"input shape {x.value.shape} does not match kernel {kernel.value.shape}")
    xp = np.pad(x.value, ((0, 0), (padding, padding), (padding, padding)))
    if xp.shape[1] < kh or xp.shape[2] < kw:
        raise ValueError(f"input {x.value.shape} smaller than kernel {(kh, kw)}")
    cols, ho, wo = _sliding_cols(xp, kh, kw, stride)
    kmat = kernel.value.reshape(o, c * kh * kw)
    out_val = (kmat @ cols + bias.value[:, None]).reshape(o, ho, wo)
    out = Var(out_val, (x, kernel, bias))

    def back():
        dout = out.grad.reshape(o, ho * wo)
        _accum(kernel, (dout @ cols.T).reshape(kernel.value.shape))
        _accum(bias, dout.sum(axis=1))
        dcols = (kmat.T @ dout).reshape(c, kh, kw, ho, wo)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
        if padding:
            dxp = dxp[:, padding:-padding, padding:-padding]
        _accum(x, dxp)

    out._backward = back
    return out


def backward(loss: Var) -> None:
    """Reverse-mode sweep from a scalar loss; fills ``grad`` on every node."""
    if loss.value.shape != ():
        raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    loss.grad = np.asarray(1.0)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward()


# ---------------------------------------------------------------------------
# Layer containers


@dataclass
class Mlp:
    """Affine layers with an activation tag per layer."""

    layers: list  # [(Var weight (out, in), Var bias (out,), "relu"|"identity"|"logistic")]

    def forward(self, x: Var) -> Var:
        for w, b, act in self.layers:
            x = add(matvec(w, x), b)
            if act == "relu":
                x = relu(x)
            elif act == "logistic":
                x = logistic(x)
            elif act != "identity":
                raise ValueError(f"unknown activation {act!r}")
        return x

    def parameters(self, prefix: str) -> dict[str, Var]:
        out = {}
        for i, (w, b, _) in enumerate(self.layers):
            out[f"{prefix}.{i}.weight"] = w
            out[f"{prefix}.{i}.bias"] = b
        return out


@dataclass
class ConvEncoder:
    """Stacked convolutions followed by a flatten.

    Hidden layers take relu; the final layer stays linear, so a single
    1x1 identity kernel really is the identity map.
    """

    layers: list  # [(Var kernel (O, C, kh, kw), Var bias (O,), stride, padding)]

    def forward(self, x: Var) -> Var:
        for i, (kernel, bias, stride, padding) in enumerate(self.layers):
            x = conv2d(x, kernel, bias, stride=stride, padding=padding)
            if i + 1 < len(self.layers):
                x = relu(x)
        return flatten(x)

    def parameters(self, prefix: str) -> dict[str, Var]:
        out = {}
        for i, (kernel, bias, _, _) in enumerate(self.layers):
            out[f"{prefix}.{i}.kernel"] = kernel
            out[f"{prefix}.{i}.bias"] = bias
        return out


def mlp_forward(net: Mlp, x) -> np.ndarray:
    """Inference-only forward pass."""
    return net.forward(as_var(x)).value


def conv_forward(enc: ConvEncoder, x) -> np.ndarray:
    """Inference-only forward pass (convolutions then flatten)."""
    return enc.forward(as_var(x)).value


# ---------------------------------------------------------------------------
# Initialization, SGD, checkpoints


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def make_mlp(rng: np.random.Generator, sizes, activations) -> Mlp:
    if len(activations) != len(sizes) - 1:
        raise ValueError("need one activation per layer")
    layers = []
    for i, act in enumerate(activations):
        n_in, n_out = sizes[i], sizes[i + 1]
        w = Var(glorot_uniform(rng, (n_out, n_in), n_in, n_out))
        b = Var(np.zeros(n_out))
        layers.append((w, b, act))
    return Mlp(layers)


def make_conv_encoder(rng: np.random.Generator, specs) -> ConvEncoder:
    """specs: [(in_ch, out_ch, k, stride, padding), ...]."""
    layers = []
    for in_ch, out_ch, k, stride, padding in specs:
        fan_in, fan_out = in_ch * k * k, out_ch * k * k
        kernel = Var(glorot_uniform(rng, (out_ch, in_ch, k, k), fan_in, fan_out))
        bias = Var(np.zeros(out_ch))
        layers.append((kernel, bias, stride, padding))
    return ConvEncoder(layers)


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             learning_rate: float) -> dict[str, np.ndarray]:
    """One plain gradient step ``p - lr * g`` per named tensor."""
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError(f"{name}: non-finite gradient")
        out[name] = p - learning_rate * g
    return out


class AdamState:
    """Per-tensor first/second moment buffers for the Adam variant."""

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, learning_rate: float,
              beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> dict[str, np.ndarray]:
    """Adam update behind the same params/grads interface as sgd_step."""
    state.t += 1
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError(f"{name}: non-finite gradient")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1.0 - beta1 ** state.t)
        v_hat = v / (1.0 - beta2 ** state.t)
        out[name] = p - learning_rate * m_hat / (np.sqrt(v_hat) + eps)
    return out


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    manifest = {
        "tensors": [
            {
                "name": name,
                "shape": list(tensors[name].shape),
                "data": [float(x) for x in tensors[name].reshape(-1)],
            }
            for name in sorted(tensors)
        ]
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(canonical_dumps(manifest))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "r", encoding="utf-8") as fh:
        manifest = parse_json_no_duplicates(fh.read())
    tensors = {}
    for rec in manifest["tensors"]:
        tensors[rec["name"]] = np.asarray(rec["data"], dtype=np.float64).reshape(rec["shape"])
    return tensors
