"""Dense-tensor building blocks for the recurrent solver.

Everything here operates on float32 ``torch.Tensor`` values in NCHW layout and
is differentiable through torch autograd.  The module deliberately stays small:
validated convolution wrappers, a convolutional GRU cell, spectral
normalization with an explicit power-iteration state, a functional Adam step,
and a ``backward`` helper that maps a scalar loss to named parameter
gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Mapping, NamedTuple, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractError, NonFiniteError, ShapeError

SPECTRAL_SIGMA_FLOOR = 1e-12


def ensure_finite(t: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return t


def conv2d(
    x: torch.Tensor,
    weight: torch.Tensor,
    bias: Optional[torch.Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> torch.Tensor:
    """Cross-correlation with shape validation; weight is (out, in, k, k)."""
    if x.dim() != 4 or weight.dim() != 4:
        raise ShapeError(
            f"conv2d expects 4-d input and weight, got {tuple(x.shape)} and {tuple(weight.shape)}"
        )
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input has {x.shape[1]} channels, weight expects {weight.shape[1]}"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(
            f"conv2d bias shape {tuple(bias.shape)} does not match {weight.shape[0]} output channels"
        )
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def conv_transpose2d(
    x: torch.Tensor,
    weight: torch.Tensor,
    bias: Optional[torch.Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    output_padding: int = 0,
) -> torch.Tensor:
    """Adjoint of :func:`conv2d` with the same geometry; weight is (in, out, k, k)."""
    if x.dim() != 4 or weight.dim() != 4:
        raise ShapeError(
            f"conv_transpose2d expects 4-d input and weight, got {tuple(x.shape)} and {tuple(weight.shape)}"
        )
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(
            f"conv_transpose2d channel mismatch: input has {x.shape[1]} channels, weight expects {weight.shape[0]}"
        )
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(
            f"conv_transpose2d bias shape {tuple(bias.shape)} does not match {weight.shape[1]} output channels"
        )
    if output_padding >= stride:
        raise ShapeError(f"output_padding {output_padding} must be smaller than stride {stride}")
    return F.conv_transpose2d(
        x, weight, bias, stride=stride, padding=padding, output_padding=output_padding
    )


class ConvParams(NamedTuple):
    weight: torch.Tensor
    bias: Optional[torch.Tensor]


class GruGates(NamedTuple):
    """The three gate convolutions of a convolutional GRU: update, reset, candidate."""

    z: ConvParams
    r: ConvParams
    h: ConvParams


def gru_conv_cell(x: torch.Tensor, h: torch.Tensor, gates: GruGates) -> torch.Tensor:
    """One convolutional GRU update.

    z = sigmoid(Conv_z[x, h]), r = sigmoid(Conv_r[x, h]),
    cand = tanh(Conv_h[x, r * h]), h' = (1 - z) * h + z * cand.
    Gate convolutions are kxk with padding k//2 so spatial size is preserved.
    """
    if x.shape[-2:] != h.shape[-2:] or x.shape[0] != h.shape[0]:
        raise ShapeError(
            f"gru_conv_cell spatial/batch mismatch: x {tuple(x.shape)} vs h {tuple(h.shape)}"
        )
    pad = gates.z.weight.shape[-1] // 2
    xh = torch.cat([x, h], dim=1)
    z = torch.sigmoid(conv2d(xh, gates.z.weight, gates.z.bias, 1, pad))
    r = torch.sigmoid(conv2d(xh, gates.r.weight, gates.r.bias, 1, pad))
    del xh
    cand = torch.tanh(
        conv2d(torch.cat([x, r * h], dim=1), gates.h.weight, gates.h.bias, 1, pad)
    )
    del r
    return (1.0 - z) * h + z * cand


class ConvGRUCell(nn.Module):
    """Parameter container for one convolutional GRU; forward delegates to the functional cell."""

    def __init__(self, in_channels: int, hidden_channels: int, kernel_size: int = 3):
        super().__init__()
        pad = kernel_size // 2
        self.z = nn.Conv2d(in_channels + hidden_channels, hidden_channels, kernel_size, padding=pad)
        self.r = nn.Conv2d(in_channels + hidden_channels, hidden_channels, kernel_size, padding=pad)
        self.h = nn.Conv2d(in_channels + hidden_channels, hidden_channels, kernel_size, padding=pad)
        self.hidden_channels = hidden_channels

    def gates(self) -> GruGates:
        return GruGates(
            z=ConvParams(self.z.weight, self.z.bias),
            r=ConvParams(self.r.weight, self.r.bias),
            h=ConvParams(self.h.weight, self.h.bias),
        )

    def forward(self, x: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        return gru_conv_cell(x, h, self.gates())


@dataclass
class SpectralState:
    """Persisted left singular vector estimate for power iteration.

    ``u`` has length out-channels and stays unit-norm; ``n_power_iterations``
    is how many iterations one ``update=True`` call performs.
    """

    u: torch.Tensor
    n_power_iterations: int = 1


def _unit(x: torch.Tensor, fallback: torch.Tensor) -> torch.Tensor:
    n = x.norm()
    if n <= SPECTRAL_SIGMA_FLOOR:
        return fallback
    return x / n


def spectral_normalize(
    weight: torch.Tensor,
    state: SpectralState,
    update: bool = False,
    out_dim: int = 0,
) -> torch.Tensor:
    """Divide ``weight`` by its estimated top singular value.

    The weight is matricized to (out-channels) x (everything else); ``out_dim``
    names the output-channel axis (1 for transposed-convolution layout).  When
    ``update`` is set the stored ``u`` advances by ``n_power_iterations`` power
    iterations in place; otherwise the frozen ``u`` is used as-is.  The sigma
    estimate is floored at 1e-12, so an all-zero weight maps to zeros.
    """
    if out_dim == 0:
        w_mat = weight.reshape(weight.shape[0], -1)
    else:
        w_mat = weight.transpose(0, out_dim).reshape(weight.shape[out_dim], -1)
    if state.u.shape != (w_mat.shape[0],):
        raise ShapeError(
            f"spectral state u has shape {tuple(state.u.shape)}, expected ({w_mat.shape[0]},)"
        )
    with torch.no_grad():
        u = state.u
        if update:
            for _ in range(state.n_power_iterations):
                v = _unit(w_mat.t().mv(u), torch.zeros(w_mat.shape[1]))
                u = _unit(w_mat.mv(v), u)
            state.u.copy_(u)
        v = _unit(w_mat.t().mv(u), torch.zeros(w_mat.shape[1]))
    sigma = torch.dot(u, w_mat.mv(v))
    return weight / sigma.clamp_min(SPECTRAL_SIGMA_FLOOR)


class SpectralConv2d(nn.Module):
    """Convolution (plain or transposed) whose weight is spectrally normalized.

    Power iteration advances only via :meth:`power_iterate`, which the training
    loop calls once per optimization step; inference reuses the frozen ``u``.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int = 3,
        stride: int = 1,
        padding: int = 1,
        bias: bool = True,
        transposed: bool = False,
        output_padding: int = 0,
    ):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.output_padding = output_padding
        self.transposed = transposed
        if transposed:
            shape = (in_channels, out_channels, kernel_size, kernel_size)
        else:
            shape = (out_channels, in_channels, kernel_size, kernel_size)
        self.weight = nn.Parameter(torch.empty(shape))
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None
        u0 = torch.zeros(out_channels)
        u0[0] = 1.0
        self.register_buffer("u", u0)

    def spectral_state(self) -> SpectralState:
        return SpectralState(u=self.u)

    def power_iterate(self, n: int = 1) -> None:
        state = SpectralState(u=self.u, n_power_iterations=n)
        spectral_normalize(self.weight, state, update=True, out_dim=1 if self.transposed else 0)

    def normalized_weight(self) -> torch.Tensor:
        return spectral_normalize(
            self.weight, self.spectral_state(), update=False, out_dim=1 if self.transposed else 0
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        w = self.normalized_weight()
        if self.transposed:
            return conv_transpose2d(x, w, self.bias, self.stride, self.padding, self.output_padding)
        return conv2d(x, w, self.bias, self.stride, self.padding)


def backward(root: torch.Tensor, params: Mapping[str, torch.Tensor]) -> Dict[str, torch.Tensor]:
    """Reverse-mode gradients of a scalar ``root`` for every named parameter.

    Parameters that do not influence ``root`` get zero gradients rather than
    ``None`` so callers can rely on the full key set.
    """
    if root.dim() != 0:
        raise ContractError(f"backward requires a scalar root, got shape {tuple(root.shape)}")
    names = list(params.keys())
    grads = torch.autograd.grad(root, [params[n] for n in names], allow_unused=True)
    return {
        n: (g if g is not None else torch.zeros_like(params[n])) for n, g in zip(names, grads)
    }


@dataclass
class AdamMoments:
    m: Dict[str, torch.Tensor]
    v: Dict[str, torch.Tensor]

    @classmethod
    def zeros_like(cls, params: Mapping[str, torch.Tensor]) -> "AdamMoments":
        return cls(
            m={n: torch.zeros_like(p) for n, p in params.items()},
            v={n: torch.zeros_like(p) for n, p in params.items()},
        )


def adam_step(
    params: Mapping[str, torch.Tensor],
    grads: Mapping[str, torch.Tensor],
    moments: AdamMoments,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    t: int = 1,
) -> None:
    """Standard Adam update with bias correction, in place on params and moments.

    A non-finite gradient rejects the whole step before touching any state.
    """
    if t < 1:
        raise ContractError(f"adam_step needs t >= 1, got {t}")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(
                f"gradient shape {tuple(g.shape)} does not match parameter '{name}' {tuple(p.shape)}"
            )
        if not torch.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter '{name}', step rejected")
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            m = moments.m[name]
            v = moments.v[name]
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            p.addcdiv_(m / bc1, (v / bc2).sqrt().add_(eps), value=-lr)
