"""Forward model of alpha compositing, its Gaussian likelihood, and state setup.

The solution state bundles foreground color, background color and alpha as a
7-channel map.  States carry an explicit ``space`` tag: ``canonical`` means
every channel lives in [0, 1] (unclamped intermediates allowed mid-solve),
``network`` means the affine [-1, 1] encoding the solver iterates in.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import torch

from .errors import ContractError, ParameterError, ShapeError, ValidationError

CANONICAL = "canonical"
NETWORK = "network"

TRIMAP_BACKGROUND = 0
TRIMAP_UNKNOWN = 1
TRIMAP_FOREGROUND = 2


def _batched(t: torch.Tensor, channels: int, what: str) -> torch.Tensor:
    """Normalize (C,H,W) or (N,C,H,W) to batched form and check channel count."""
    if t.dim() == 3:
        t = t.unsqueeze(0)
    if t.dim() != 4 or t.shape[1] != channels:
        raise ShapeError(f"{what} must have {channels} channels, got shape {tuple(t.shape)}")
    return t


def as_image(t: torch.Tensor) -> torch.Tensor:
    """Validate an observed image: 3 channels, float32, finite, range [0, 1]."""
    t = _batched(t.to(torch.float32), 3, "observed image")
    if not torch.isfinite(t).all():
        raise ValidationError("observed image contains non-finite values")
    if t.min() < 0.0 or t.max() > 1.0:
        raise ValidationError(
            f"observed image values outside [0, 1]: min {t.min():.4f}, max {t.max():.4f}"
        )
    return t


@dataclass
class MattingState:
    """7-channel solution [F(3), B(3), alpha(1)] with an explicit space tag."""

    x: torch.Tensor
    space: str = CANONICAL

    def __post_init__(self):
        self.x = _batched(self.x, 7, "matting state")

    @classmethod
    def from_maps(
        cls, fg: torch.Tensor, bg: torch.Tensor, alpha: torch.Tensor, space: str = CANONICAL
    ) -> "MattingState":
        fg = _batched(fg, 3, "foreground")
        bg = _batched(bg, 3, "background")
        alpha = _batched(alpha, 1, "alpha")
        if fg.shape[-2:] != bg.shape[-2:] or fg.shape[-2:] != alpha.shape[-2:]:
            raise ShapeError(
                f"foreground {tuple(fg.shape)}, background {tuple(bg.shape)} and "
                f"alpha {tuple(alpha.shape)} disagree spatially"
            )
        return cls(torch.cat([fg, bg, alpha], dim=1), space)

    @property
    def fg(self) -> torch.Tensor:
        return self.x[:, 0:3]

    @property
    def bg(self) -> torch.Tensor:
        return self.x[:, 3:6]

    @property
    def alpha(self) -> torch.Tensor:
        return self.x[:, 6:7]

    @property
    def height(self) -> int:
        return self.x.shape[-2]

    @property
    def width(self) -> int:
        return self.x.shape[-1]

    def require_space(self, space: str, op: str) -> "MattingState":
        if self.space != space:
            raise ContractError(f"{op} requires a {space}-space state, got {self.space}")
        return self

    def clone(self) -> "MattingState":
        return MattingState(self.x.clone(), self.space)

    def detach(self) -> "MattingState":
        return MattingState(self.x.detach(), self.space)


class GradientVariant(enum.Enum):
    """Which form of the likelihood-gradient features the solver consumes.

    ANALYTIC differentiates the Gaussian log-likelihood exactly.  VERBATIM is a
    sign-variant transcription kept selectable for reproduction experiments:
    its mismatch term adds the background instead of subtracting the blended
    background, its background response uses a (-2 + 2*alpha) factor, and its
    alpha response is an absolute channel sum.
    """

    ANALYTIC = "analytic"
    VERBATIM = "verbatim"


@dataclass
class LikelihoodGradient:
    """Per-channel gradient of the compositing log-likelihood, shaped like the state."""

    d_fg: torch.Tensor
    d_bg: torch.Tensor
    d_alpha: torch.Tensor
    sigma: float

    def as_channels(self) -> torch.Tensor:
        return torch.cat([self.d_fg, self.d_bg, self.d_alpha], dim=1)


def composite(state: MattingState) -> torch.Tensor:
    """Blend the state into an image: alpha * F + (1 - alpha) * B."""
    state.require_space(CANONICAL, "composite")
    a = state.alpha
    return a * state.fg + (1.0 - a) * state.bg


def residual(image: torch.Tensor, state: MattingState) -> torch.Tensor:
    """Observation minus the state's composite."""
    image = _batched(image, 3, "observed image")
    if image.shape[-2:] != state.x.shape[-2:]:
        raise ShapeError(
            f"image {tuple(image.shape)} and state {tuple(state.x.shape)} disagree spatially"
        )
    return image - composite(state)


def log_likelihood(image: torch.Tensor, state: MattingState, sigma: float = 1.0) -> torch.Tensor:
    """Gaussian log-likelihood -||residual||^2 / sigma^2 summed over all pixels and channels."""
    if sigma <= 0.0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    r = residual(image, state)
    return -(r * r).sum() / (sigma * sigma)


def likelihood_gradient(
    image: torch.Tensor,
    state: MattingState,
    sigma: float = 1.0,
    variant: GradientVariant = GradientVariant.ANALYTIC,
) -> LikelihoodGradient:
    """Gradient of :func:`log_likelihood` with respect to F, B and alpha.

    The analytic variant satisfies finite-difference checks by construction.
    The verbatim variant intentionally does not; see :class:`GradientVariant`.
    """
    if sigma <= 0.0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    image = _batched(image, 3, "observed image")
    if image.shape[-2:] != state.x.shape[-2:]:
        raise ShapeError(
            f"image {tuple(image.shape)} and state {tuple(state.x.shape)} disagree spatially"
        )
    inv_s2 = 1.0 / (sigma * sigma)
    a = state.alpha
    fg = state.fg
    bg = state.bg
    if variant is GradientVariant.ANALYTIC:
        r = image - (a * fg + (1.0 - a) * bg)
        d_fg = 2.0 * inv_s2 * a * r
        d_bg = 2.0 * inv_s2 * (1.0 - a) * r
        d_alpha = 2.0 * inv_s2 * ((fg - bg) * r).sum(dim=1, keepdim=True)
    else:
        e = image - a * fg + bg - a * bg
        d_fg = 2.0 * inv_s2 * a * e
        d_bg = inv_s2 * (-2.0 + 2.0 * a) * e
        d_alpha = inv_s2 * ((2.0 * fg + 2.0 * bg) * e).abs().sum(dim=1, keepdim=True)
    return LikelihoodGradient(d_fg=d_fg, d_bg=d_bg, d_alpha=d_alpha, sigma=sigma)


def init_state(
    image: torch.Tensor,
    trimap: torch.Tensor | None,
    alpha0: torch.Tensor,
) -> MattingState:
    """Build the starting state from an image, an initial alpha and optionally a trimap.

    Alpha starts at ``alpha0``.  With a trimap, F copies the image on known
    foreground and B on known background, zeros elsewhere.  Without one, the
    pixels where ``alpha0`` is exactly 1 (resp. 0) play those roles.
    """
    image = as_image(image)
    alpha0 = _batched(alpha0.to(torch.float32), 1, "initial alpha")
    if alpha0.shape[-2:] != image.shape[-2:]:
        raise ShapeError(
            f"initial alpha {tuple(alpha0.shape)} does not match image {tuple(image.shape)}"
        )
    bad = ((alpha0 < 0.0) | (alpha0 > 1.0)).sum().item()
    if bad:
        raise ValidationError(f"initial alpha outside [0, 1] at {bad} pixels")
    if trimap is not None:
        trimap = _batched(trimap.to(torch.uint8), 1, "trimap")
        if trimap.shape[-2:] != image.shape[-2:]:
            raise ShapeError(
                f"trimap {tuple(trimap.shape)} does not match image {tuple(image.shape)}"
            )
        fg_mask = (trimap == TRIMAP_FOREGROUND).to(torch.float32)
        bg_mask = (trimap == TRIMAP_BACKGROUND).to(torch.float32)
    else:
        fg_mask = (alpha0 == 1.0).to(torch.float32)
        bg_mask = (alpha0 == 0.0).to(torch.float32)
    return MattingState.from_maps(image * fg_mask, image * bg_mask, alpha0, CANONICAL)
