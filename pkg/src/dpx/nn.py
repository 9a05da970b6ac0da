"""Parameterized layers shared by all attention variants.

Every layer comes as a (forward, backward) pair: forward returns the
output plus a cache of intermediates, backward consumes the cache and the
output cotangent and returns input/parameter gradients. There is no
autodiff tape; composites chain these analytic functions by hand and the
gradcheck harness validates each one against central finite differences.

GELU uses the tanh approximation

    gelu(x) = 0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3)))

with the constants written out below, so results are reproducible across
implementations.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DimensionError, ConfigError
from .tensor import Tensor, RngState, meter_report, zeros

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


# ---------------------------------------------------------------------------
# Parameter registry
# ---------------------------------------------------------------------------


class ParamModule:
    """Mixin giving dotted-name parameter traversal and replacement.

    Subclasses list Tensor attributes in ``param_names`` and submodule
    attributes (module, or list of modules) in ``child_names``. Since
    tensors are immutable, "updating" a parameter rebinds the attribute.
    """

    param_names: tuple[str, ...] = ()
    child_names: tuple[str, ...] = ()

    def named_params(self, prefix: str = ""):
        for n in self.param_names:
            t = getattr(self, n)
            if t is not None:
                yield f"{prefix}{n}", t
        for n in self.child_names:
            child = getattr(self, n)
            if child is None:
                continue
            if isinstance(child, (list, tuple)):
                for i, sub in enumerate(child):
                    yield from sub.named_params(f"{prefix}{n}.{i}.")
            else:
                yield from child.named_params(f"{prefix}{n}.")

    def set_param(self, name: str, value: Tensor) -> None:
        head, _, rest = name.partition(".")
        if not rest:
            if head not in self.param_names or getattr(self, head) is None:
                raise KeyError(name)
            setattr(self, head, value)
            return
        if head not in self.child_names:
            raise KeyError(name)
        child = getattr(self, head)
        if isinstance(child, (list, tuple)):
            idx, _, rest = rest.partition(".")
            child = child[int(idx)]
        child.set_param(rest, value)

    def num_params(self) -> int:
        return sum(t.size for _, t in self.named_params())


def accumulate(grads: dict, name: str, g: Tensor) -> None:
    grads[name] = g if name not in grads else grads[name] + g


def merge_grads(dst: dict, src: dict, prefix: str) -> None:
    for k, v in src.items():
        accumulate(dst, prefix + k, v)


# ---------------------------------------------------------------------------
# Linear
# ---------------------------------------------------------------------------


class Linear(ParamModule):
    """Affine map y = x W + b with W[d_in, d_out]."""

    param_names = ("weight", "bias")

    def __init__(self, weight: Tensor, bias: Tensor | None):
        self.weight = weight
        self.bias = bias

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]

    @staticmethod
    def init(rng: RngState, d_in: int, d_out: int, bias: bool = True,
             precision: str = "single", zero: bool = False,
             std: float | None = None) -> "Linear":
        """Truncated-normal weights (std 0.02 unless overridden), zero bias;
        ``zero`` gives an all-zero layer (used for residual-branch output
        projections)."""
        if zero:
            w = zeros((d_in, d_out), precision)
        else:
            w = rng.trunc_normal((d_in, d_out), std=std if std is not None else 0.02,
                                 precision=precision)
        b = zeros((d_out,), precision) if bias else None
        return Linear(w, b)


def linear_forward(layer: Linear, x: Tensor) -> tuple[Tensor, dict]:
    if x.ndim != 2 or x.shape[1] != layer.d_in:
        raise DimensionError(
            f"linear: input {x.shape} incompatible with weight {layer.weight.shape}"
        )
    y = x @ layer.weight
    if layer.bias is not None:
        meter_report(adds=y.size)
        y = Tensor(y.data + layer.bias.data, y.precision)
    return y, {"x": x}


def linear_backward(layer: Linear, cache: dict, dy: Tensor):
    """Returns (grad_x, grads) with grads keyed 'weight'/'bias'."""
    x = cache["x"]
    if dy.shape != (x.shape[0], layer.d_out):
        raise DimensionError(f"linear backward: cotangent shape {dy.shape} unexpected")
    dx = dy @ Tensor(layer.weight.data.T, layer.weight.precision)
    dw = Tensor(x.data.T, x.precision) @ dy
    grads = {"weight": dw}
    if layer.bias is not None:
        grads["bias"] = Tensor(dy.data.sum(axis=0), dy.precision)
    return dx, grads


# ---------------------------------------------------------------------------
# Layer norm
# ---------------------------------------------------------------------------


class LayerNorm(ParamModule):
    param_names = ("gain", "shift")

    def __init__(self, gain: Tensor, shift: Tensor, eps: float = 1e-5):
        self.gain = gain
        self.shift = shift
        self.eps = eps

    @staticmethod
    def init(d: int, precision: str = "single", eps: float = 1e-5) -> "LayerNorm":
        if d <= 0:
            raise DimensionError(f"layernorm: normalized extent must be positive, got {d}")
        return LayerNorm(
            Tensor(np.ones(d), precision), Tensor(np.zeros(d), precision), eps
        )


def layernorm_forward(ln: LayerNorm, x: Tensor) -> tuple[Tensor, dict]:
    """Normalize the last axis to zero mean / unit variance, then scale+shift.

    Scalar-op counts reported per row of extent d: mean (d-1 adds, 1 div),
    centering (d adds), variance (d muls, d-1 adds, 1 div, 1 add for eps),
    1 sqrt, normalization (d divs), gain (d muls), shift (d adds).
    """
    d = ln.gain.shape[0]
    if x.shape[-1] != d:
        raise DimensionError(f"layernorm: last extent {x.shape} != gain extent {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + ln.eps)
    xhat = xc * inv
    y = xhat * ln.gain.data + ln.shift.data
    rows = x.size // d
    meter_report(
        muls=rows * 2 * d,
        adds=rows * (4 * d - 1),
        divs=rows * (d + 2),
        sqrts=rows,
    )
    return Tensor(y, x.precision), {"xhat": xhat, "inv": inv, "d": d}


def layernorm_backward(ln: LayerNorm, cache: dict, dy: Tensor):
    xhat, inv, d = cache["xhat"], cache["inv"], cache["d"]
    g = dy.data * ln.gain.data
    # classic fused form: dx = inv/d * (d*g - sum(g) - xhat * sum(g*xhat))
    dx = (inv / d) * (d * g - g.sum(axis=-1, keepdims=True)
                      - xhat * (g * xhat).sum(axis=-1, keepdims=True))
    dgain = (dy.data * xhat).reshape(-1, d).sum(axis=0)
    dshift = dy.data.reshape(-1, d).sum(axis=0)
    grads = {
        "gain": Tensor(dgain, dy.precision),
        "shift": Tensor(dshift, dy.precision),
    }
    return Tensor(dx, dy.precision), grads


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------


def gelu_forward(x: Tensor) -> tuple[Tensor, dict]:
    """tanh-approximation GELU; costs 6 muls, 2 adds, 1 tanh per element."""
    u = GELU_C * (x.data + GELU_A * x.data**3)
    t = np.tanh(u)
    y = 0.5 * x.data * (1.0 + t)
    meter_report(muls=6 * x.size, adds=2 * x.size, tanhs=x.size)
    return Tensor(y, x.precision), {"x": x.data, "t": t}


def gelu_backward(cache: dict, dy: Tensor) -> Tensor:
    x, t = cache["x"], cache["t"]
    du = GELU_C * (1.0 + 3.0 * GELU_A * x * x)
    dx = dy.data * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
    return Tensor(dx, dy.precision)


def sigmoid_forward(x: Tensor) -> tuple[Tensor, dict]:
    y = 1.0 / (1.0 + np.exp(-x.data))
    meter_report(exps=x.size, adds=x.size, divs=x.size)
    return Tensor(y, x.precision), {"y": y}


def sigmoid_backward(cache: dict, dy: Tensor) -> Tensor:
    y = cache["y"]
    return Tensor(dy.data * y * (1.0 - y), dy.precision)


def softmax_backward(y: Tensor, dy: Tensor, axis: int = -1) -> Tensor:
    """Backward of softmax given its output y: y * (dy - sum(dy * y))."""
    dot = np.sum(dy.data * y.data, axis=axis, keepdims=True)
    return Tensor(y.data * (dy.data - dot), dy.precision)


# ---------------------------------------------------------------------------
# Two-layer MLP
# ---------------------------------------------------------------------------

FINAL_ACTIVATIONS = ("none", "softmax", "sigmoid")


class Mlp2(ParamModule):
    """linear -> GELU -> linear -> optional row softmax / sigmoid.

    The final activation is selectable because the relation discriminators
    come in a row-normalized (softmax) and an independent-gate (sigmoid)
    variant; plain feed-forward blocks use "none".
    """

    child_names = ("first", "second")

    def __init__(self, first: Linear, second: Linear, final_activation: str = "none"):
        if final_activation not in FINAL_ACTIVATIONS:
            raise ConfigError(f"mlp2: unknown final activation {final_activation!r}")
        if first.d_out != second.d_in:
            raise DimensionError(
                f"mlp2: hidden dims disagree ({first.d_out} vs {second.d_in})"
            )
        self.first = first
        self.second = second
        self.final_activation = final_activation

    @staticmethod
    def init(rng: RngState, d_in: int, hidden: int, d_out: int,
             final_activation: str = "none", precision: str = "single",
             zero_out: bool = False) -> "Mlp2":
        return Mlp2(
            Linear.init(rng, d_in, hidden, precision=precision),
            Linear.init(rng, hidden, d_out, precision=precision, zero=zero_out),
            final_activation,
        )


def mlp2_forward(m: Mlp2, x: Tensor) -> tuple[Tensor, dict]:
    h_pre, c1 = linear_forward(m.first, x)
    h, cg = gelu_forward(h_pre)
    o, c2 = linear_forward(m.second, h)
    cache = {"c1": c1, "cg": cg, "c2": c2}
    if m.final_activation == "softmax":
        from .tensor import softmax

        y = softmax(o, axis=-1)
        cache["act_out"] = y
    elif m.final_activation == "sigmoid":
        y, ca = sigmoid_forward(o)
        cache["ca"] = ca
    else:
        y = o
    return y, cache


def mlp2_backward(m: Mlp2, cache: dict, dy: Tensor):
    if m.final_activation == "softmax":
        do = softmax_backward(cache["act_out"], dy, axis=-1)
    elif m.final_activation == "sigmoid":
        do = sigmoid_backward(cache["ca"], dy)
    else:
        do = dy
    dh, g2 = linear_backward(m.second, cache["c2"], do)
    dh_pre = gelu_backward(cache["cg"], dh)
    dx, g1 = linear_backward(m.first, cache["c1"], dh_pre)
    grads: dict = {}
    merge_grads(grads, g1, "first.")
    merge_grads(grads, g2, "second.")
    return dx, grads


# ---------------------------------------------------------------------------
# Stochastic depth
# ---------------------------------------------------------------------------


class DropPathConfig:
    def __init__(self, rate: float = 0.0, mode: str = "eval"):
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"drop path rate must be in [0, 1), got {rate}")
        if mode not in ("train", "eval"):
            raise ConfigError(f"drop path mode must be train/eval, got {mode!r}")
        self.rate = rate
        self.mode = mode


def drop_path_forward(cfg: DropPathConfig, x: Tensor, rng: RngState | None = None):
    """Randomly zero the whole residual branch in train mode; exact identity
    in eval mode or at rate 0."""
    if cfg.mode == "eval" or cfg.rate == 0.0:
        return x, {"scale": 1.0}
    if rng is None:
        raise ConfigError("drop path in train mode needs an RngState")
    u = float(rng.uniform((1,)).data[0])
    if u < cfg.rate:
        return zeros(x.shape, x.precision), {"scale": 0.0}
    s = 1.0 / (1.0 - cfg.rate)
    return x * s, {"scale": s}


def drop_path_backward(cache: dict, dy: Tensor) -> Tensor:
    s = cache["scale"]
    if s == 1.0:
        return dy
    if s == 0.0:
        return zeros(dy.shape, dy.precision)
    return dy * s
