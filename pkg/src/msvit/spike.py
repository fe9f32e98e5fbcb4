"""Numeric substrate: LIF neurons, surrogate gradients, batch norm and the
accumulate-only linear/conv kernels.

Multi-step tensors carry time as the leading axis. Token-form tensors are
``(T, B, N, D)``; image-form tensors are ``(T, B, C, H, W)``. Spikes are kept as
floating point tensors inside the network so autograd can flow through them;
:func:`as_spikes` converts to the one-byte-per-element storage form.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .energy import active_profiler, conv_flops, linear_flops

TOKEN = "token"
IMAGE = "image"


class SpikeError(ValueError):
    pass


def check_spikes(x: torch.Tensor, max_value: int = 1, name: str = "tensor") -> None:
    """Raise unless every element of ``x`` is an integer in ``[0, max_value]``."""
    if x.numel() == 0:
        raise SpikeError(f"{name} is empty")
    if not torch.equal(x, torch.round(x)):
        raise SpikeError(f"{name} has non-integer values")
    lo, hi = x.min().item(), x.max().item()
    if lo < 0 or hi > max_value:
        raise SpikeError(f"{name} values outside [0, {max_value}]: min={lo}, max={hi}")


def as_spikes(data, layout: str = TOKEN, max_value: int = 1) -> torch.Tensor:
    """Validate ``data`` as a spike tensor and return it as ``uint8``.

    Degenerate tensors (``T == 0`` or an empty token/spatial axis) are rejected.
    """
    x = torch.as_tensor(np.asarray(data))
    want = 4 if layout == TOKEN else 5
    if layout not in (TOKEN, IMAGE):
        raise SpikeError(f"unknown layout {layout!r}")
    if x.dim() != want:
        raise SpikeError(f"{layout}-form spike tensor needs {want} dims, got {tuple(x.shape)}")
    if any(s == 0 for s in x.shape):
        raise SpikeError(f"degenerate spike tensor shape {tuple(x.shape)}")
    check_spikes(x.double(), max_value)
    return x.to(torch.uint8)


def tokens_to_image(x: torch.Tensor, hw: tuple[int, int]) -> torch.Tensor:
    """``(T, B, N, D)`` -> ``(T, B, D, H, W)``."""
    t, b, n, d = x.shape
    h, w = hw
    if h * w != n:
        raise SpikeError(f"{n} tokens do not factor into a {h}x{w} grid")
    return x.transpose(2, 3).reshape(t, b, d, h, w)


def image_to_tokens(x: torch.Tensor) -> torch.Tensor:
    """``(T, B, C, H, W)`` -> ``(T, B, H*W, C)``."""
    t, b, c, h, w = x.shape
    return x.reshape(t, b, c, h * w).transpose(2, 3)


# -- LIF neuron ---------------------------------------------------------------

@dataclass(frozen=True)
class LifParams:
    tau: float = 2.0
    v_th: float = 1.0
    v_reset: float = 0.0
    surrogate_alpha: float = 2.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not self.v_th > self.v_reset:
            raise ValueError(f"v_th ({self.v_th}) must exceed v_reset ({self.v_reset})")
        if not self.surrogate_alpha > 0:
            raise ValueError("surrogate_alpha must be positive")


@dataclass
class LifState:
    v: Optional[torch.Tensor] = None
    step: int = 0


def atan_surrogate_grad(h: torch.Tensor, v_th: float, alpha: float) -> torch.Tensor:
    """Derivative of ``atan(pi*alpha*x/2)/pi + 1/2`` at ``x = h - v_th``."""
    x = h - v_th
    return alpha / (2 * (1 + (math.pi * alpha * x / 2) ** 2))


def atan_primitive(x: torch.Tensor, alpha: float) -> torch.Tensor:
    """Smooth step whose derivative is the surrogate; used in smoothed mode."""
    return torch.atan(math.pi / 2 * alpha * x) / math.pi + 0.5


def lif_surrogate_backward(grad_out: torch.Tensor, saved_h: Optional[torch.Tensor],
                           params: LifParams) -> torch.Tensor:
    if saved_h is None:
        raise RuntimeError("no saved membrane potential; run the forward pass first")
    return grad_out * atan_surrogate_grad(saved_h, params.v_th, params.surrogate_alpha)


class _AtanSpike(torch.autograd.Function):

    @staticmethod
    def forward(ctx, h, params):
        ctx.save_for_backward(h)
        ctx.params = params
        return (h >= params.v_th).to(h.dtype)

    @staticmethod
    def backward(ctx, grad_out):
        (h,) = ctx.saved_tensors
        return lif_surrogate_backward(grad_out, h, ctx.params), None


def lif_step(x: torch.Tensor, v: torch.Tensor, params: LifParams,
             smooth: bool = False) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """One timestep: returns ``(spikes, h, v_next)``."""
    h = v + (1.0 / params.tau) * (x - (v - params.v_reset))
    if smooth:
        s = atan_primitive(h - params.v_th, params.surrogate_alpha)
    else:
        s = _AtanSpike.apply(h, params)
    # the hard-spike reset is detached; the smooth path stays fully differentiable
    sd = s if smooth else s.detach()
    v_next = h * (1.0 - sd) + params.v_reset * sd
    return s, h, v_next


def lif_forward(current: torch.Tensor, params: LifParams = LifParams(),
                state: Optional[LifState] = None, smooth: bool = False) -> torch.Tensor:
    """Run the neuron over the leading time axis of ``current``.

    ``state`` is updated in place so consecutive calls continue the membrane
    trajectory; pass ``None`` to start from ``v_reset``.
    """
    if current.dim() < 1 or current.shape[0] == 0:
        raise SpikeError("current needs a non-empty leading time axis")
    if not torch.isfinite(current).all():
        raise SpikeError("current contains non-finite values")
    if state is None:
        state = LifState()
    v = state.v
    if v is None:
        v = torch.full_like(current[0], params.v_reset)
    elif v.shape != current.shape[1:]:
        raise SpikeError(f"state shape {tuple(v.shape)} does not match current "
                         f"{tuple(current.shape[1:])}")
    out = []
    for t in range(current.shape[0]):
        s, _, v = lif_step(current[t], v, params, smooth)
        out.append(s)
    state.v = v
    state.step += current.shape[0]
    return torch.stack(out)


class LIF(nn.Module):
    """Multi-step LIF layer.

    Membrane state lives for one forward call unless ``persist`` is set, in
    which case it carries over between calls until :func:`reset_state`.
    """

    smooth = False

    def __init__(self, params: LifParams = LifParams()):
        super().__init__()
        self.params = params
        self.track = False
        self.persist = False
        self.state: Optional[LifState] = None
        self.spike_count = 0.0
        self.element_count = 0

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        state = None
        if self.persist:
            if self.state is None:
                self.state = LifState()
            state = self.state
        s = lif_forward(x, self.params, state=state, smooth=self.smooth)
        if self.track:
            self.spike_count += float(s.detach().sum())
            self.element_count += s.numel()
        return s

    def extra_repr(self) -> str:
        p = self.params
        return f"tau={p.tau}, v_th={p.v_th}, v_reset={p.v_reset}"


def set_persistent(module: nn.Module, persist: bool = True) -> None:
    """Carry membrane state across calls for every LIF in ``module``."""
    for m in module.modules():
        if isinstance(m, LIF):
            m.persist = persist
            m.state = None


def reset_state(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, LIF):
            m.state = None


def set_smooth(module: nn.Module, smooth: bool = True) -> None:
    """Switch every LIF in ``module`` to the differentiable smoothed mode.

    Smoothed outputs are not spikes; this exists for gradient checking only.
    """
    for m in module.modules():
        if isinstance(m, LIF):
            m.smooth = smooth


# -- batch norm ---------------------------------------------------------------

def bn_forward(x: torch.Tensor, bn: nn.modules.batchnorm._BatchNorm,
               layout: str = TOKEN, training: Optional[bool] = None) -> torch.Tensor:
    """Batch norm over the channel axis of a multi-step tensor.

    Statistics are taken over time, batch and token/space axes together.
    """
    if training is None:
        training = bn.training
    if layout == TOKEN:
        t, b, n, d = x.shape
        flat = x.reshape(t * b * n, d)
    elif layout == IMAGE:
        t, b, c, h, w = x.shape
        flat = x.reshape(t * b, c, h, w)
    else:
        raise SpikeError(f"unknown layout {layout!r}")
    if training and flat.shape[0] == 0:
        raise SpikeError("batch norm in train mode needs a non-empty batch")
    momentum = bn.momentum if bn.momentum is not None else 0.1
    out = F.batch_norm(flat, bn.running_mean, bn.running_var, bn.weight, bn.bias,
                       training, momentum, bn.eps)
    return out.reshape(x.shape)


class SeqBN(nn.Module):
    """BatchNorm for token-form or image-form multi-step tensors."""

    def __init__(self, channels: int, layout: str = TOKEN, eps: float = 1e-5,
                 momentum: float = 0.1):
        super().__init__()
        self.layout = layout
        self.bn = nn.BatchNorm1d(channels, eps=eps, momentum=momentum) if layout == TOKEN \
            else nn.BatchNorm2d(channels, eps=eps, momentum=momentum)

    def forward(self, x):
        return bn_forward(x, self.bn, self.layout)


# -- accumulate-only kernels -------------------------------------------------

def spike_linear(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None,
                 name: str = "linear", entrance: bool = False) -> torch.Tensor:
    """``x @ weight.T (+ bias)`` over the last axis.

    ``x`` holds spikes or small integers, so every product is a selected weight
    row and the kernel is an accumulation. Reports FLOPs and realized SOPs to
    the active profiler.
    """
    if x.shape[-1] != weight.shape[1]:
        raise SpikeError(f"inner dims differ: input {x.shape[-1]} vs weight {weight.shape[1]}")
    out = F.linear(x, weight, bias)
    prof = active_profiler()
    if prof is not None:
        tokens = x.shape[2] if x.dim() == 4 else 1
        samples = x.shape[1] if x.dim() >= 3 else x.shape[0]
        d_out, d_in = weight.shape
        with torch.no_grad():
            spikes = float(x.sum())
        prof.record(name, "linear", linear_flops(d_in, d_out, tokens), spikes, x.numel(),
                    samples, sops=spikes * d_out, entrance=entrance)
    return out


def _conv_fanout_sops(x: torch.Tensor, k: int, stride: int, padding: int, c_out: int) -> float:
    """Exact sum over inputs of value times the number of outputs each reaches."""
    with torch.no_grad():
        summed = x.sum(dim=1, keepdim=True)
        ones = torch.ones(1, 1, k, k, dtype=x.dtype, device=x.device)
        reach = F.conv2d(summed, ones, stride=stride, padding=padding)
        return float(reach.sum()) * c_out


def spike_conv2d(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None,
                 stride: int = 1, padding: int = 0, name: str = "conv",
                 entrance: bool = False) -> torch.Tensor:
    """2-D cross-correlation of an image-form ``(T, B, C, H, W)`` tensor."""
    if x.dim() != 5:
        raise SpikeError(f"expected (T, B, C, H, W), got {tuple(x.shape)}")
    t, b, c, h, w = x.shape
    c_out, c_in, k, _ = weight.shape
    if c != c_in:
        raise SpikeError(f"input has {c} channels, kernel expects {c_in}")
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (w + 2 * padding - k) // stride + 1
    if h_out < 1 or w_out < 1:
        raise SpikeError(f"output spatial size {h_out}x{w_out} for input {h}x{w}")
    flat = x.reshape(t * b, c, h, w)
    out = F.conv2d(flat, weight, bias, stride=stride, padding=padding)
    prof = active_profiler()
    if prof is not None:
        with torch.no_grad():
            spikes = float(x.sum())
        prof.record(name, "conv", conv_flops(k, c_in, c_out, h_out, w_out), spikes, x.numel(),
                    b, sops=_conv_fanout_sops(flat, k, stride, padding, c_out),
                    entrance=entrance)
    return out.reshape(t, b, c_out, h_out, w_out)


def maxpool2d(x: torch.Tensor) -> torch.Tensor:
    """2x2/stride-2 max pool of an image-form tensor; odd sides are zero-padded."""
    t, b, c, h, w = x.shape
    flat = x.reshape(t * b, c, h, w)
    if h % 2 or w % 2:
        flat = F.pad(flat, (0, w % 2, 0, h % 2))
    out = F.max_pool2d(flat, 2, 2)
    return out.reshape(t, b, c, out.shape[-2], out.shape[-1])


def assign_paths(module: nn.Module, prefix: str = "") -> None:
    """Name every profiled submodule by its dotted path under ``prefix``."""
    for name, m in module.named_modules():
        if hasattr(m, "path"):
            full = ".".join(p for p in (prefix, name) if p)
            m.path = full or m.path


def _init_weight(w: torch.Tensor, fan_in: int, generator=None) -> None:
    with torch.no_grad():
        w.normal_(0.0, math.sqrt(2.0 / fan_in), generator=generator)


class SpikeLinear(nn.Module):
    """Linear layer on token-form tensors, reporting to the profiler."""

    def __init__(self, d_in: int, d_out: int, bias: bool = False, entrance: bool = False):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(d_out, d_in))
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None
        self.entrance = entrance
        self.path = "linear"
        _init_weight(self.weight, d_in)

    def forward(self, x):
        return spike_linear(x, self.weight, self.bias, name=self.path, entrance=self.entrance)


class SpikeConv2d(nn.Module):
    """Square-kernel conv on image-form tensors, reporting to the profiler."""

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int = 1,
                 padding: Optional[int] = None, bias: bool = False, entrance: bool = False):
        super().__init__()
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.weight = nn.Parameter(torch.empty(c_out, c_in, kernel, kernel))
        self.bias = nn.Parameter(torch.zeros(c_out)) if bias else None
        self.entrance = entrance
        self.path = "conv"
        _init_weight(self.weight, c_in * kernel * kernel)

    def forward(self, x):
        return spike_conv2d(x, self.weight, self.bias, self.stride, self.padding,
                            name=self.path, entrance=self.entrance)

    def extra_repr(self) -> str:
        c_out, c_in, k, _ = self.weight.shape
        return f"{c_in}, {c_out}, kernel={k}, stride={self.stride}, padding={self.padding}"
