"""The recurrent solver: network, iteration loop, and hidden-state editing hook.

One iteration consumes the current 7-channel solution (in [-1, 1] network
space) concatenated with the 7-channel likelihood gradient, and emits an
additive update.  Two convolutional GRUs carry spatial memory between
iterations: one at half resolution, one at full resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .compositing import (
    CANONICAL,
    NETWORK,
    GradientVariant,
    MattingState,
    likelihood_gradient,
)
from .errors import ContractError, NonFiniteError, ShapeError
from .numerics import ConvGRUCell, SpectralConv2d, conv2d

STATE_CHANNELS = 7
INPUT_CHANNELS = 14
FEATURE_CHANNELS = 32
HIDDEN_CHANNELS = 128


@dataclass
class IterationConfig:
    iterations: int = 5
    sigma: float = 1.0
    gradient_variant: GradientVariant = GradientVariant.ANALYTIC
    loss_weights: Optional[Sequence[float]] = None
    # ablation switch: cut gradients flowing back through the likelihood features
    detach_gradient_features: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ContractError(f"iteration count must be >= 1, got {self.iterations}")
        if self.sigma <= 0.0:
            raise ContractError(f"sigma must be positive, got {self.sigma}")
        if self.loss_weights is not None:
            if any(w <= 0.0 for w in self.loss_weights):
                raise ContractError("all loss weights must be positive")

    def weights_vector(self) -> List[float]:
        if self.loss_weights is None:
            return [1.0] * self.iterations
        return list(self.loss_weights)


@dataclass
class HiddenState:
    """Two spatial memories: h1 at half resolution, h2 at full resolution."""

    h1: torch.Tensor
    h2: torch.Tensor

    @classmethod
    def zeros(cls, batch: int, height: int, width: int) -> "HiddenState":
        h1 = torch.zeros(batch, HIDDEN_CHANNELS, (height + 1) // 2, (width + 1) // 2)
        h2 = torch.zeros(batch, HIDDEN_CHANNELS, height, width)
        return cls(h1=h1, h2=h2)

    def clone(self) -> "HiddenState":
        return HiddenState(self.h1.clone(), self.h2.clone())

    def detach(self) -> "HiddenState":
        return HiddenState(self.h1.detach(), self.h2.detach())


class RimNet(nn.Module):
    """Downsample -> GRU -> upsample -> GRU -> project, 1,155,680 parameters.

    The outer convolutions are spectrally normalized; the output projection is
    not.  GRU gate convolutions are plain (unnormalized) 3x3 convolutions.
    """

    def __init__(self, seed: int = 0):
        super().__init__()
        self.conv_in = SpectralConv2d(
            INPUT_CHANNELS, FEATURE_CHANNELS, 3, stride=2, padding=1, bias=True
        )
        self.gru1 = ConvGRUCell(FEATURE_CHANNELS, HIDDEN_CHANNELS)
        self.conv_up = SpectralConv2d(
            HIDDEN_CHANNELS,
            FEATURE_CHANNELS,
            3,
            stride=2,
            padding=1,
            bias=False,
            transposed=True,
            output_padding=1,
        )
        self.gru2 = ConvGRUCell(FEATURE_CHANNELS, HIDDEN_CHANNELS)
        self.conv_out = nn.Conv2d(HIDDEN_CHANNELS, STATE_CHANNELS, 3, padding=1, bias=False)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)

        def xavier(w: torch.Tensor, gain: float = 1.0, fan_dims: Tuple[int, int] = (1, 0)):
            fan_in = w.shape[fan_dims[0]] * w.shape[2] * w.shape[3]
            fan_out = w.shape[fan_dims[1]] * w.shape[2] * w.shape[3]
            bound = gain * math.sqrt(6.0 / (fan_in + fan_out))
            with torch.no_grad():
                w.uniform_(-bound, bound, generator=gen)

        xavier(self.conv_in.weight)
        with torch.no_grad():
            self.conv_in.bias.zero_()
        for gru in (self.gru1, self.gru2):
            for gate in (gru.z, gru.r, gru.h):
                xavier(gate.weight)
                with torch.no_grad():
                    gate.bias.zero_()
        xavier(self.conv_up.weight, fan_dims=(0, 1))
        # small output projection so the first updates are gentle but nonzero
        xavier(self.conv_out.weight, gain=0.1)
        for m in (self.conv_in, self.conv_up):
            with torch.no_grad():
                u0 = torch.randn(m.u.shape, generator=gen)
                m.u.copy_(u0 / u0.norm())
            m.power_iterate(5)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def power_iterate(self, n: int = 1) -> None:
        """Advance the spectral-norm power iteration; call once per training step."""
        self.conv_in.power_iterate(n)
        self.conv_up.power_iterate(n)


def to_network_space(state: MattingState) -> MattingState:
    """Affine map x -> 2x - 1 on all 7 channels."""
    state.require_space(CANONICAL, "to_network_space")
    return MattingState(2.0 * state.x - 1.0, NETWORK)


def to_canonical_space(state: MattingState) -> MattingState:
    """Affine map x -> (x + 1) / 2 on all 7 channels, clamped into [0, 1]."""
    state.require_space(NETWORK, "to_canonical_space")
    return MattingState(((state.x + 1.0) * 0.5).clamp(0.0, 1.0), CANONICAL)


def rim_step(
    image: torch.Tensor,
    state: MattingState,
    hidden: HiddenState,
    net: RimNet,
    config: IterationConfig,
) -> Tuple[torch.Tensor, HiddenState]:
    """One solver iteration: predict the additive update and the next memories.

    The likelihood gradient is evaluated in canonical units of the (unclamped)
    current iterate; network space only rescales it by a constant factor.
    """
    state.require_space(NETWORK, "rim_step")
    x = state.x
    if image.dim() == 3:
        image = image.unsqueeze(0)
    if image.shape[-2:] != x.shape[-2:]:
        raise ShapeError(
            f"image {tuple(image.shape)} and state {tuple(x.shape)} disagree spatially"
        )
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ContractError(
            f"rim_step needs even spatial dimensions, got {h}x{w}; pad the inputs first"
        )
    if hidden.h2.shape[-2:] != (h, w):
        raise ShapeError(
            f"hidden state {tuple(hidden.h2.shape)} does not match image {h}x{w}"
        )
    canonical_x = MattingState((x + 1.0) * 0.5, CANONICAL)
    grad = likelihood_gradient(
        image, canonical_x, config.sigma, config.gradient_variant
    ).as_channels()
    if config.detach_gradient_features:
        grad = grad.detach()
    inp = torch.cat([x, grad], dim=1)
    feat = torch.tanh(net.conv_in(inp))
    del inp, grad
    h1 = net.gru1(feat, hidden.h1)
    up = torch.tanh(net.conv_up(h1))
    h2 = net.gru2(up, hidden.h2)
    del up
    dx = conv2d(h2, net.conv_out.weight, net.conv_out.bias, 1, 1)
    return dx, HiddenState(h1=h1, h2=h2)


EditHook = Callable[[int, MattingState, HiddenState], Optional[Tuple[MattingState, HiddenState]]]


@dataclass
class Trajectory:
    """States x_0 .. x_T (kept in network space) plus the final hidden memories.

    ``states()`` converts to canonical space with the final clamp applied;
    training reads ``network_states`` directly so gradients are not cut by the
    clamp.
    """

    network_states: List[MattingState]
    hidden: HiddenState

    def states(self) -> List[MattingState]:
        return [to_canonical_space(s) for s in self.network_states]

    def final(self) -> MattingState:
        return to_canonical_space(self.network_states[-1])

    def __len__(self) -> int:
        return len(self.network_states)


def _pad_to_even(t: torch.Tensor) -> Tuple[torch.Tensor, Tuple[int, int]]:
    h, w = t.shape[-2:]
    ph, pw = h % 2, w % 2
    if ph or pw:
        t = F.pad(t, (0, pw, 0, ph), mode="reflect")
    return t, (ph, pw)


def run_inference(
    image: torch.Tensor,
    x0: MattingState,
    net: RimNet,
    config: IterationConfig,
    edit_hook: Optional[EditHook] = None,
) -> Trajectory:
    """Iterate the solver from a canonical starting state.

    Odd image sizes are reflection-padded to even and cropped again at the
    end.  The optional ``edit_hook`` runs after each iteration on the padded
    grid and may return a replacement (state, hidden) pair.  A non-finite
    update aborts with the failing iteration index.  Wrap the call in
    ``torch.no_grad()`` for pure inference; the training loop relies on the
    graph staying intact.
    """
    x0.require_space(CANONICAL, "run_inference")
    if image.dim() == 3:
        image = image.unsqueeze(0)
    if image.shape[-2:] != x0.x.shape[-2:]:
        raise ShapeError(
            f"image {tuple(image.shape)} and initial state {tuple(x0.x.shape)} disagree spatially"
        )
    orig_h, orig_w = image.shape[-2:]
    image, _ = _pad_to_even(image)
    x_padded, (ph, pw) = _pad_to_even(x0.x)
    x = to_network_space(MattingState(x_padded, CANONICAL)).x
    hidden = HiddenState.zeros(x.shape[0], x.shape[-2], x.shape[-1])
    states = [MattingState(x, NETWORK)]
    for t in range(1, config.iterations + 1):
        dx, hidden = rim_step(image, states[-1], hidden, net, config)
        if not torch.isfinite(dx).all():
            raise NonFiniteError(f"non-finite update at iteration {t}")
        states.append(MattingState(states[-1].x + dx, NETWORK))
        if edit_hook is not None:
            replaced = edit_hook(t, states[-1], hidden)
            if replaced is not None:
                new_state, hidden = replaced
                new_state.require_space(NETWORK, "edit_hook result")
                states[-1] = new_state
    if ph or pw:
        states = [MattingState(s.x[..., :orig_h, :orig_w], NETWORK) for s in states]
        hidden = HiddenState(
            h1=hidden.h1[..., : (orig_h + 1) // 2, : (orig_w + 1) // 2],
            h2=hidden.h2[..., :orig_h, :orig_w],
        )
    return Trajectory(network_states=states, hidden=hidden)


def zero_hidden(hidden: HiddenState, mask: torch.Tensor) -> HiddenState:
    """Zero both memories under a full-resolution binary mask.

    h2 is zeroed exactly at masked pixels; h1 at every half-resolution cell
    whose 2x2 footprint intersects the mask.
    """
    if mask.dim() == 2:
        mask = mask.unsqueeze(0).unsqueeze(0)
    elif mask.dim() == 3:
        mask = mask.unsqueeze(1)
    if mask.shape[-2:] != hidden.h2.shape[-2:]:
        raise ShapeError(
            f"mask {tuple(mask.shape)} does not match hidden resolution {tuple(hidden.h2.shape[-2:])}"
        )
    keep2 = (mask == 0).to(hidden.h2.dtype)
    mask1 = F.max_pool2d((mask != 0).to(torch.float32), kernel_size=2, stride=2, ceil_mode=True)
    keep1 = (mask1 == 0).to(hidden.h1.dtype)
    if keep1.shape[-2:] != hidden.h1.shape[-2:]:
        raise ShapeError(
            f"derived half-resolution mask {tuple(keep1.shape)} does not match h1 "
            f"{tuple(hidden.h1.shape)}"
        )
    return HiddenState(h1=hidden.h1 * keep1, h2=hidden.h2 * keep2)
