"""Reverse-mode gradients, cross-entropy, SGD and finite-difference checks.

Backward rules work on batches (leading axis N), mirroring the ``*_batch``
forward kernels. A forward pass records ``(layer input, aux)`` per layer on
a tape; :func:`backprop` walks the tape in reverse.

Randomness everywhere (init, shuffling, subsampling) comes from numpy's
PCG64 bit generator, seeded with the caller's 64-bit seed.
"""

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .errors import CorrespondenceError, DimensionError, DomainError
from .net import forward_layer, forward_logits, layer_params_of

CE_EPS = 1e-12


# ---------------------------------------------------------------- kernel backward rules

def conv2d_backward(x, kernel, spec, g):
    """Gradients of a batched conv2d w.r.t. input, kernel and bias."""
    win = tc.conv_windows(x, spec)
    dk = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
    db = g.sum(axis=(0, 2, 3))
    dcols = np.tensordot(g, kernel, axes=([1], [0]))  # (N, H', W', C, kh, kw)
    n, c, h, w = x.shape
    p, s = spec.padding, spec.stride
    oh, ow = g.shape[2:]
    dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=g.dtype)
    for i in range(spec.kernel_h):
        for j in range(spec.kernel_w):
            dxp[:, :, i:i + (oh - 1) * s + 1:s, j:j + (ow - 1) * s + 1:s] += \
                dcols[..., i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, p:p + h, p:p + w], dk, db


def maxpool2d_backward(x_shape, window, stride, argmax, g):
    # ties were resolved to the first maximum in row-major order at forward time
    dx = np.zeros(x_shape, dtype=g.dtype)
    oh, ow = g.shape[2:]
    for a in range(window * window):
        i, j = divmod(a, window)
        dx[:, :, i:i + (oh - 1) * stride + 1:stride, j:j + (ow - 1) * stride + 1:stride] += \
            np.where(argmax == a, g, 0)
    return dx


def relu_backward(x, g):
    return g * (x > 0)


def dense_backward(x, weights, g):
    return g @ weights, g.T @ x, g.sum(axis=0)


def global_avg_pool_backward(x_shape, g):
    n, c, h, w = x_shape
    return np.broadcast_to(g[:, :, None, None] / (h * w), x_shape).copy()


def residual_block_backward(x, hidden, pre, w1, w2, spec, g):
    gpre = relu_backward(pre, g)
    dh, dw2, db2 = conv2d_backward(hidden, w2, spec, gpre)
    dx1, dw1, db1 = conv2d_backward(x, w1, spec, relu_backward(hidden, dh))
    return gpre + dx1, {"conv1.weight": dw1, "conv1.bias": db1, "conv2.weight": dw2, "conv2.bias": db2}


def backward_layer(layer, p, x, aux, g):
    """Gradient w.r.t. the layer input plus ``{short_name: grad}`` for its params."""
    kind = layer.kind
    if kind == "conv":
        dx, dk, db = conv2d_backward(x, p["weight"], layer.spec, g)
        return dx, {"weight": dk, "bias": db}
    if kind == "relu":
        return relu_backward(x, g), {}
    if kind == "maxpool":
        return maxpool2d_backward(x.shape, layer.window, layer.stride, aux, g), {}
    if kind == "residual_block":
        hidden, pre = aux
        return residual_block_backward(x, hidden, pre, p["conv1.weight"], p["conv2.weight"],
                                       layer.spec, g)
    if kind == "global_avg_pool":
        return global_avg_pool_backward(x.shape, g), {}
    if kind == "flatten":
        return g.reshape(x.shape), {}
    if kind == "dense":
        dx, dw, db = dense_backward(x, p["weight"], g)
        return dx, {"weight": dw, "bias": db}
    raise DimensionError(f"no backward rule for layer kind {kind!r}")


def backprop(model, tape, dlogits, stop=0, want_params=True):
    """Walk the tape from the logits down to layer ``stop``.

    Returns ``(grads, dinput)`` where ``dinput`` is the gradient w.r.t. the
    input of layer ``stop`` (equivalently the output of layer ``stop - 1``).
    """
    g = dlogits
    grads = {}
    layers = model.config.logit_layers
    for idx in range(len(tape) - 1, stop - 1, -1):
        layer = layers[idx]
        x, aux = tape[idx]
        g, pg = backward_layer(layer, layer_params_of(model, idx), x, aux, g)
        if want_params:
            prefix = f"{idx:02d}_{layer.kind}."
            for k, v in pg.items():
                grads[prefix + k] = v
    if want_params:
        grads = {k: grads[k] for k in model.params if k in grads}
    return grads, g


# ---------------------------------------------------------------- loss

def cross_entropy(probs, target):
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1:
        raise DimensionError(f"cross_entropy expects a probability vector, got shape {probs.shape}")
    if not 0 <= target < probs.size:
        raise IndexError(f"target class {target} out of range [0, {probs.size})")
    if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-4:
        raise DomainError("cross_entropy needs a probability vector (entries >= 0, sum 1)")
    return -math.log(max(probs[target], CE_EPS))


def _onehot(targets, k, dtype):
    out = np.zeros((len(targets), k), dtype=dtype)
    out[np.arange(len(targets)), targets] = 1
    return out


def batch_forward_backward(model, xs, targets):
    """Per-sample losses and the batch-mean gradient for inputs ``xs`` (N, C, H, W)."""
    targets = np.asarray(targets, dtype=np.intp)
    tape = []
    z = forward_logits(model, xs, tape)
    probs = tc.softmax(z)
    rows = np.arange(len(targets))
    losses = -np.log(np.maximum(probs[rows, targets].astype(np.float64), CE_EPS))
    dlogits = (probs - _onehot(targets, z.shape[1], z.dtype)) / len(targets)
    grads, _ = backprop(model, tape, dlogits.astype(z.dtype, copy=False))
    return losses, grads


def forward_backward(model, x, target):
    """Loss and parameter gradients for one input tensor of the model's input shape."""
    x = np.asarray(x, dtype=model.dtype)
    if tuple(x.shape) != model.config.input_shape:
        raise DimensionError(f"input shape {x.shape} does not match model input {model.config.input_shape}")
    if not 0 <= target < model.config.shapes()[-1][0]:
        raise IndexError(f"target class {target} out of range")
    losses, grads = batch_forward_backward(model, x[None], [target])
    return float(losses[0]), grads


def loss_value(model, x, target):
    z = forward_logits(model, np.asarray(x, dtype=model.dtype)[None])[0]
    return cross_entropy(tc.softmax(z.astype(np.float64)), target)


# ---------------------------------------------------------------- SGD

def check_correspondence(params, grads):
    if list(params) != list(grads):
        raise CorrespondenceError(f"gradient names {list(grads)} do not match params {list(params)}")
    for k, v in params.items():
        if np.shape(grads[k]) != v.shape:
            raise CorrespondenceError(f"gradient {k} has shape {np.shape(grads[k])}, param has {v.shape}")


def sgd_step(params, grads, learning_rate):
    """Return ``theta - learning_rate * grad`` for every parameter (inputs untouched)."""
    check_correspondence(params, grads)
    return {k: (v - learning_rate * grads[k]).astype(v.dtype) for k, v in params.items()}


# ---------------------------------------------------------------- finite differences

def relative_error(a, n):
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def _sample_indices(params, max_scalars, rng):
    """Every scalar if the model is small, else a per-tensor random subsample."""
    total = sum(v.size for v in params.values())
    out = {}
    if max_scalars is None or total <= max_scalars:
        return {k: np.arange(v.size) for k, v in params.items()}
    per_tensor = max(8, -(-max_scalars // len(params)))
    for k, v in params.items():
        n = min(v.size, per_tensor)
        out[k] = np.sort(rng.choice(v.size, size=n, replace=False))
    return out


def activation_pattern(model, x):
    """Which ReLUs are active and which pool cells win, for one float64 input."""
    tape = []
    z = forward_logits(model, x[None], tape)
    pattern = []
    for layer, (inp, aux) in zip(model.config.logit_layers, tape):
        if layer.kind == "relu":
            pattern.append(inp > 0)
        elif layer.kind == "maxpool":
            pattern.append(aux)
        elif layer.kind == "residual_block":
            pattern.extend((aux[0] > 0, aux[1] > 0))
    return z[0], pattern


def _same_pattern(a, b):
    return all(np.array_equal(u, v) for u, v in zip(a, b))


@dataclass
class GradCheckReport:
    errors: dict
    checked: int
    refined: int
    skipped: int

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)


def grad_check_report(model, x, target, h=1e-3, max_scalars=400, seed=0, min_step=1e-9):
    """Analytic gradients vs central differences, in float64, per parameter tensor.

    A stencil that flips a ReLU or moves a pool argmax straddles a kink,
    where central differences do not estimate the derivative. Such scalars
    are retried with the step divided by 10 until the activation pattern
    is stable (``refined``); a scalar still straddling at ``min_step``
    sits on the kink itself and is counted in ``skipped``.
    """
    model64 = model.astype(np.float64)
    x64 = np.asarray(x, dtype=np.float64)
    _, analytic = forward_backward(model64, x64, target)
    _, base_pattern = activation_pattern(model64, x64)
    rng = np.random.Generator(np.random.PCG64(seed))

    def loss_and_pattern(name, value):
        z, pattern = activation_pattern(model64.with_params({**model64.params, name: value}), x64)
        return cross_entropy(tc.softmax(z), target), pattern

    errors, checked, refined, skipped = {}, 0, 0, 0
    for name, idxs in _sample_indices(model64.params, max_scalars, rng).items():
        base = model64.params[name]
        worst = 0.0
        for flat in idxs:
            flat = int(flat)
            step = h
            while True:
                pert = base.copy()
                pert.flat[flat] = base.flat[flat] + step
                up, p_up = loss_and_pattern(name, pert)
                pert.flat[flat] = base.flat[flat] - step
                down, p_down = loss_and_pattern(name, pert)
                if _same_pattern(p_up, base_pattern) and _same_pattern(p_down, base_pattern):
                    break
                step /= 10
                if step < min_step:
                    step = None
                    break
            if step is None:
                skipped += 1
                continue
            refined += step != h
            checked += 1
            numeric = (up - down) / (2 * step)
            worst = max(worst, relative_error(float(analytic[name].flat[flat]), numeric))
        errors[name] = worst
    return GradCheckReport(errors, checked, refined, skipped)


def grad_check(model, x, target, h=1e-3, max_scalars=400, seed=0):
    """Max relative error over every scalar (or a per-tensor subsample of ~``max_scalars``)."""
    if h <= 0:
        raise DomainError("finite-difference step must be positive")
    return grad_check_report(model, x, target, h, max_scalars, seed).max_error


def layer_grad_check(layer, params, x, h=1e-3, seed=0):
    """Check one layer in isolation against ``L = sum(r * layer(x))`` for a random ``r``.

    Covers the input gradient and every parameter scalar. Everything runs in
    float64. Returns the max relative error.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    x = np.asarray(x, dtype=np.float64)
    out, aux = forward_layer(layer, params, x)
    r = rng.standard_normal(out.shape)

    def loss(p, xx):
        return float(np.sum(r * forward_layer(layer, p, xx)[0]))

    dx, pgrads = backward_layer(layer, params, x, aux, r)
    worst = 0.0
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        worst = max(worst, relative_error(dx.flat[i], (loss(params, xp) - loss(params, xm)) / (2 * h)))
    for k, v in params.items():
        for i in range(v.size):
            vp, vm = v.copy(), v.copy()
            vp.flat[i] += h
            vm.flat[i] -= h
            numeric = (loss({**params, k: vp}, x) - loss({**params, k: vm}, x)) / (2 * h)
            worst = max(worst, relative_error(pgrads[k].flat[i], numeric))
    return worst


# ---------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.005
    epochs: int = 30
    batch_size: int = 5
    rng_seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0 or not math.isfinite(self.learning_rate):
            raise DomainError("learning_rate must be a finite nonnegative number")
        if self.epochs < 1 or self.batch_size < 1:
            raise DomainError("epochs and batch_size must be positive")
        if not 0 <= self.rng_seed < 2 ** 64:
            raise DomainError("rng_seed must fit in 64 unsigned bits")


def stack_inputs(images, model):
    """Preprocess raw images (or pass through ready tensors) into one (N, C, H, W) batch."""
    from .net import preprocess

    tensors = []
    for img in images:
        arr = np.asarray(img)
        tensors.append(arr if arr.shape == model.config.input_shape else preprocess(arr))
    return np.stack(tensors).astype(model.dtype, copy=False)


def train_toy(model, dataset, config):
    """Mini-batch SGD over ``dataset`` (a sequence of ``(image, label)`` pairs).

    Each epoch draws a fresh permutation from the seeded generator. Returns
    the trained model and the per-epoch mean training loss.
    """
    if len(dataset) == 0:
        raise DomainError("cannot train on an empty dataset")
    labels = np.array([int(lbl) for _, lbl in dataset], dtype=np.intp)
    n_classes = model.config.shapes()[-1][0]
    if labels.min() < 0 or labels.max() >= n_classes:
        raise DomainError(f"labels must lie in [0, {n_classes})")
    xs = stack_inputs([img for img, _ in dataset], model)
    rng = np.random.Generator(np.random.PCG64(config.rng_seed))
    params = dict(model.params)
    history = []
    for _ in range(config.epochs):
        order = rng.permutation(len(dataset))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            current = model.with_params(params)
            losses, grads = batch_forward_backward(current, xs[batch], labels[batch])
            total += float(losses.sum())
            # batch_forward_backward averages over the batch already
            params = sgd_step(params, grads, config.learning_rate)
        history.append(total / len(order))
    return model.with_params(params), history


def predict_batch(model, xs, chunk=64):
    out = []
    for start in range(0, len(xs), chunk):
        out.append(np.argmax(forward_logits(model, xs[start:start + chunk]), axis=1))
    return np.concatenate(out)


def accuracy(model, dataset):
    xs = stack_inputs([img for img, _ in dataset], model)
    labels = np.array([int(lbl) for _, lbl in dataset])
    return float(np.mean(predict_batch(model, xs) == labels))


def losses_csv(history):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "mean_loss"])
    for epoch, loss in enumerate(history, start=1):
        writer.writerow([epoch, repr(float(loss))])
    return buf.getvalue()
