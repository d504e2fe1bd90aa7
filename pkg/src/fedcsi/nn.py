"""Minimal float64 conv-net engine: explicit forward/backward, MSE, SGD/Adam.

Tensors are plain numpy arrays, row-major, shape (height, width, channels)
for a single sample or (batch, height, width, channels) for batches.  All
convolutions are stride-1 with same padding, so spatial size is preserved
end to end and the network maps an H x W x C_in grid to H x W x C_out.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772
SOFTPLUS_CUTOFF = 30.0  # softplus(x) ~ x above this; avoids exp overflow
ACTIVATIONS = ("selu", "softplus")


@dataclass(frozen=True)
class LayerSpec:
    kernel_h: int
    kernel_w: int
    filters: int
    activation: str


@dataclass(frozen=True)
class NetworkSpec:
    """Conv-stack description: ordered layers plus the input grid shape."""

    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int]

    def validate(self) -> None:
        if len(self.layers) < 1:
            raise ValueError("network needs at least one layer")
        if len(self.input_shape) != 3 or any(d < 1 for d in self.input_shape):
            raise ValueError(f"bad input shape {self.input_shape}")
        for i, layer in enumerate(self.layers):
            if layer.kernel_h < 1 or layer.kernel_w < 1 or layer.filters < 1:
                raise ValueError(f"layer {i}: non-positive kernel/filter size")
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"layer {i}: unknown activation {layer.activation!r}")


def default_network_spec(height: int = 72, width: int = 14) -> NetworkSpec:
    """Three-layer estimation CNN on 2-channel (real/imag) grids."""
    return NetworkSpec(
        layers=(
            LayerSpec(5, 5, 24, "selu"),
            LayerSpec(5, 5, 8, "softplus"),
            LayerSpec(5, 5, 2, "selu"),
        ),
        input_shape=(height, width, 2),
    )


@dataclass(frozen=True)
class LayoutEntry:
    layer: int
    role: str  # "kernel" | "bias"
    shape: tuple[int, ...]
    offset: int
    size: int


def param_layout(spec: NetworkSpec) -> tuple[LayoutEntry, ...]:
    spec.validate()
    entries = []
    offset = 0
    c_in = spec.input_shape[2]
    for i, layer in enumerate(spec.layers):
        kshape = (layer.kernel_h, layer.kernel_w, c_in, layer.filters)
        ksize = int(np.prod(kshape))
        entries.append(LayoutEntry(i, "kernel", kshape, offset, ksize))
        offset += ksize
        entries.append(LayoutEntry(i, "bias", (layer.filters,), offset, layer.filters))
        offset += layer.filters
        c_in = layer.filters
    return tuple(entries)


def param_count(spec: NetworkSpec) -> int:
    return sum(e.size for e in param_layout(spec))


@dataclass
class ParamVector:
    """Flat parameter array plus the layout that maps slices to layers."""

    data: np.ndarray
    layout: tuple[LayoutEntry, ...]

    def kernel(self, layer: int) -> np.ndarray:
        e = self._entry(layer, "kernel")
        return self.data[e.offset:e.offset + e.size].reshape(e.shape)

    def bias(self, layer: int) -> np.ndarray:
        e = self._entry(layer, "bias")
        return self.data[e.offset:e.offset + e.size]

    def _entry(self, layer: int, role: str) -> LayoutEntry:
        for e in self.layout:
            if e.layer == layer and e.role == role:
                return e
        raise KeyError(f"no {role} for layer {layer}")

    def copy(self) -> "ParamVector":
        return ParamVector(self.data.copy(), self.layout)


def init_params(spec: NetworkSpec, seed: int) -> ParamVector:
    """Fan-in-scaled uniform kernels, zero biases; reproducible per (spec, seed)."""
    layout = param_layout(spec)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    data = np.zeros(sum(e.size for e in layout))
    for e in layout:
        if e.role == "kernel":
            kh, kw, c_in, _ = e.shape
            bound = np.sqrt(1.0 / (kh * kw * c_in))
            data[e.offset:e.offset + e.size] = rng.uniform(-bound, bound, e.size)
    return ParamVector(data, layout)


def flatten_params(params: ParamVector) -> np.ndarray:
    return params.data.copy()


def unflatten_params(flat: np.ndarray, spec: NetworkSpec) -> ParamVector:
    layout = param_layout(spec)
    total = sum(e.size for e in layout)
    flat = np.asarray(flat, dtype=np.float64)
    if flat.ndim != 1 or flat.size != total:
        raise ValueError(f"expected flat length {total}, got shape {flat.shape}")
    return ParamVector(flat.copy(), layout)


# --------------------------- activations ---------------------------------

def selu(x: np.ndarray) -> np.ndarray:
    neg = SELU_ALPHA * np.expm1(np.minimum(x, 0.0))
    return SELU_LAMBDA * np.where(x > 0.0, x, neg)


def selu_grad(x: np.ndarray) -> np.ndarray:
    neg = SELU_ALPHA * np.exp(np.minimum(x, 0.0))
    return SELU_LAMBDA * np.where(x > 0.0, 1.0, neg)


def softplus(x: np.ndarray) -> np.ndarray:
    return np.where(x > SOFTPLUS_CUTOFF, x, np.log1p(np.exp(np.minimum(x, SOFTPLUS_CUTOFF))))


def softplus_grad(x: np.ndarray) -> np.ndarray:
    # logistic sigmoid, stable on both tails
    pos = 1.0 / (1.0 + np.exp(-np.maximum(x, 0.0)))
    ex = np.exp(np.minimum(x, 0.0))
    neg = ex / (1.0 + ex)
    return np.where(x >= 0.0, pos, neg)


_ACT = {"selu": (selu, selu_grad), "softplus": (softplus, softplus_grad)}


# --------------------------- conv plumbing -------------------------------

def _pad_same(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    ph0, ph1 = (kh - 1) // 2, kh // 2
    pw0, pw1 = (kw - 1) // 2, kw // 2
    return np.pad(x, ((0, 0), (ph0, ph1), (pw0, pw1), (0, 0)))


def _conv_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    # shift-and-accumulate: one (A*H*W, C_in) x (C_in, C_out) product per
    # kernel offset, in a fixed offset order so summation never varies
    a, h, w, c_in = x.shape
    kh, kw, _, c_out = kernel.shape
    xp = _pad_same(x, kh, kw)
    out = np.zeros((a * h * w, c_out))
    for di in range(kh):
        for dj in range(kw):
            src = xp[:, di:di + h, dj:dj + w, :].reshape(a * h * w, c_in)
            out += src @ kernel[di, dj]
    out += bias
    return out.reshape(a, h, w, c_out)


def _conv_backward(
    x: np.ndarray, kernel: np.ndarray, dz: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (d_kernel, d_bias, d_input) of z = conv(x) + b given dL/dz."""
    a, h, w, c_in = x.shape
    kh, kw, _, c_out = kernel.shape
    xp = _pad_same(x, kh, kw)
    dz_mat = dz.reshape(a * h * w, c_out)
    d_kernel = np.empty_like(kernel)
    dxp = np.zeros_like(xp)
    for di in range(kh):
        for dj in range(kw):
            src = xp[:, di:di + h, dj:dj + w, :].reshape(a * h * w, c_in)
            d_kernel[di, dj] = src.T @ dz_mat
            dxp[:, di:di + h, dj:dj + w, :] += (dz_mat @ kernel[di, dj].T).reshape(a, h, w, c_in)
    d_bias = dz.sum(axis=(0, 1, 2))
    ph0, pw0 = (kh - 1) // 2, (kw - 1) // 2
    dx = dxp[:, ph0:ph0 + h, pw0:pw0 + w, :]
    return d_kernel, d_bias, dx


# --------------------------- public ops ----------------------------------

def _check_input(spec: NetworkSpec, x: np.ndarray) -> None:
    if tuple(x.shape[-3:]) != tuple(spec.input_shape):
        raise ValueError(f"input shape {x.shape[-3:]} != spec {spec.input_shape}")


def forward_batch(spec: NetworkSpec, params: ParamVector, xs: np.ndarray) -> np.ndarray:
    _check_input(spec, xs)
    act = np.asarray(xs, dtype=np.float64)
    for i, layer in enumerate(spec.layers):
        z = _conv_forward(act, params.kernel(i), params.bias(i))
        act = _ACT[layer.activation][0](z)
    return act


def forward(spec: NetworkSpec, params: ParamVector, x: np.ndarray) -> np.ndarray:
    """Run one sample through the network; output keeps the input grid size."""
    if x.ndim != 3:
        raise ValueError(f"expected (H, W, C) input, got shape {x.shape}")
    return forward_batch(spec, params, x[None])[0]


def mse_loss(pred: np.ndarray, target: np.ndarray) -> float:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff))


def batch_gradient(
    spec: NetworkSpec, params: ParamVector, inputs: np.ndarray, targets: np.ndarray
) -> tuple[np.ndarray, float]:
    """Gradient of the batch-mean MSE w.r.t. the flat params, plus the loss."""
    if inputs.shape[0] == 0:
        raise ValueError("empty batch")
    if inputs.shape[:3] != targets.shape[:3]:
        raise ValueError(f"inputs {inputs.shape} inconsistent with targets {targets.shape}")
    _check_input(spec, inputs)
    a = inputs.shape[0]
    acts = [np.asarray(inputs, dtype=np.float64)]
    zs = []
    for i, layer in enumerate(spec.layers):
        z = _conv_forward(acts[-1], params.kernel(i), params.bias(i))
        zs.append(z)
        acts.append(_ACT[layer.activation][0](z))
    pred = acts[-1]
    if pred.shape != targets.shape:
        raise ValueError(f"targets shape {targets.shape} != output {pred.shape}")
    diff = pred - targets
    loss = float(np.mean(diff * diff))
    grad = np.zeros_like(params.data)
    gview = ParamVector(grad, params.layout)
    # batch-mean of per-sample mean MSE: every element carries 1/(A*H*W*C)
    da = (2.0 / diff.size) * diff
    for i in range(len(spec.layers) - 1, -1, -1):
        dz = da * _ACT[spec.layers[i].activation][1](zs[i])
        d_kernel, d_bias, da = _conv_backward(acts[i], params.kernel(i), dz)
        gview.kernel(i)[...] = d_kernel
        gview.bias(i)[...] = d_bias
    return grad, loss


def backward(spec: NetworkSpec, params: ParamVector, batch: Sequence) -> ParamVector:
    """Gradient of the mean MSE over a batch of samples (input/label pairs)."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    inputs = np.stack([s.input for s in batch])
    targets = np.stack([s.label for s in batch])
    grad, _ = batch_gradient(spec, params, inputs, targets)
    return ParamVector(grad, params.layout)


# --------------------------- optimizers ----------------------------------

@dataclass
class OptimizerState:
    kind: str  # "sgd" | "adam"
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: Optional[np.ndarray] = None
    second_moment: Optional[np.ndarray] = None


def init_optimizer(
    kind: str, n_params: int, learning_rate: float, beta1: float = 0.9,
    beta2: float = 0.999, eps: float = 1e-8,
) -> OptimizerState:
    if kind not in ("sgd", "adam"):
        raise ValueError(f"unknown optimizer {kind!r}")
    state = OptimizerState(kind, learning_rate, beta1, beta2, eps)
    if kind == "adam":
        state.first_moment = np.zeros(n_params)
        state.second_moment = np.zeros(n_params)
    return state


def optimizer_step(
    params: np.ndarray, grad: np.ndarray, state: OptimizerState
) -> tuple[np.ndarray, OptimizerState]:
    if params.shape != grad.shape:
        raise ValueError(f"length mismatch {params.shape} vs {grad.shape}")
    t = state.step_count + 1
    if state.kind == "sgd":
        new = params - state.learning_rate * grad
        next_state = replace(state, step_count=t)
        return new, next_state
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grad
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new = params - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    next_state = replace(state, step_count=t, first_moment=m, second_moment=v)
    return new, next_state


def train_minibatch(
    spec: NetworkSpec,
    params: ParamVector,
    inputs: np.ndarray,
    targets: np.ndarray,
    *,
    epochs: int,
    batch_size: int,
    learning_rate: float,
    rng: np.random.Generator,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    optimizer: str = "adam",
    max_steps: Optional[int] = None,
    track_losses: bool = False,
) -> ParamVector | tuple[ParamVector, list[float]]:
    """Mini-batch training loop with per-epoch shuffling from `rng`.

    The last partial batch of each epoch is kept.  With `max_steps` the loop
    stops after that many optimizer steps regardless of epoch boundaries
    (used for the fixed-step SGD mode).  Returns the trained parameters, plus
    the per-epoch full-set losses when `track_losses` is set.
    """
    if inputs.shape[0] == 0:
        raise ValueError("empty training set")
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    n = inputs.shape[0]
    flat = params.data.copy()
    state = init_optimizer(optimizer, flat.size, learning_rate, beta1, beta2, eps)
    losses: list[float] = []
    steps = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for s in range(0, n, batch_size):
            if max_steps is not None and steps >= max_steps:
                break
            idx = order[s:s + batch_size]
            view = ParamVector(flat, params.layout)
            grad, _ = batch_gradient(spec, view, inputs[idx], targets[idx])
            flat, state = optimizer_step(flat, grad, state)
            steps += 1
        if track_losses:
            pred = forward_batch(spec, ParamVector(flat, params.layout), inputs)
            losses.append(mse_loss(pred, targets))
        if max_steps is not None and steps >= max_steps:
            break
    trained = ParamVector(flat, params.layout)
    return (trained, losses) if track_losses else trained
