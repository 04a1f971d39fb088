"""Losses, the unrolled end-to-end training loop, and checkpoint management.

Training backpropagates through the full iteration unroll, including the
hidden-state paths and the likelihood-gradient features, then applies Adam.
The sample stream is a pure function of (seed, step), so resuming from a
checkpoint reproduces the uninterrupted run exactly.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import checkpoint as ckpt
from .compositing import (
    CANONICAL,
    NETWORK,
    MattingState,
    TRIMAP_UNKNOWN,
    init_state,
)
from .datagen import AugmentConfig, MattingSample, make_sample, sample_seed_for
from .errors import (
    ContractError,
    NonFiniteError,
    ParameterError,
    SchemaError,
    ShapeError,
    ValidationError,
)
from .images import chw
from .numerics import AdamMoments, adam_step, backward
from .rim import IterationConfig, RimNet, Trajectory, run_inference, to_network_space

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    total_steps: int = 20_000
    batch_size: int = 4
    crop_size: int = 512
    seed: int = 0
    iteration: IterationConfig = field(default_factory=IterationConfig)
    checkpoint_every: int = 500

    def __post_init__(self):
        for name in ("learning_rate", "total_steps", "batch_size", "crop_size"):
            if getattr(self, name) <= 0 and name != "learning_rate":
                raise ParameterError(f"{name} must be positive, got {getattr(self, name)}")
        if self.learning_rate < 0:
            raise ParameterError(f"learning rate must be >= 0, got {self.learning_rate}")


@dataclass
class LossReport:
    per_iteration: List[float]
    total: float
    step: int = 0
    skipped: bool = False
    tensor_total: Optional[torch.Tensor] = None


def reconstruction_loss(
    x: MattingState, target: MattingState, unknown_mask: torch.Tensor
) -> torch.Tensor:
    """Mean absolute error over unknown pixels, summed across all 7 channels.

    The divisor counts unknown pixels, not pixel-channel pairs, so a single
    unknown pixel off by 0.1 in every channel scores 0.7.
    """
    if x.space != target.space:
        raise ContractError(
            f"loss inputs live in different spaces: {x.space} vs {target.space}"
        )
    if unknown_mask.dim() == 2:
        unknown_mask = unknown_mask.unsqueeze(0).unsqueeze(0)
    elif unknown_mask.dim() == 3:
        unknown_mask = unknown_mask.unsqueeze(1)
    if x.x.shape != target.x.shape or unknown_mask.shape[-2:] != x.x.shape[-2:]:
        raise ShapeError(
            f"loss shapes disagree: x {tuple(x.x.shape)}, target {tuple(target.x.shape)}, "
            f"mask {tuple(unknown_mask.shape)}"
        )
    m = (unknown_mask != 0).to(x.x.dtype)
    n_unknown = m.sum()
    if n_unknown.item() == 0:
        raise ValidationError("empty unknown region; discard the sample upstream")
    return ((x.x - target.x).abs() * m).sum() / n_unknown


def total_loss(
    trajectory: Trajectory,
    target: MattingState,
    unknown_mask: torch.Tensor,
    weights: Optional[Sequence[float]] = None,
) -> LossReport:
    """Weighted sum of per-iteration reconstruction losses over x_1 .. x_T."""
    n_iter = len(trajectory) - 1
    if weights is None:
        weights = [1.0] * n_iter
    if len(weights) != n_iter:
        raise ParameterError(
            f"{len(weights)} weights for {n_iter} iterations; counts must match"
        )
    if target.space == CANONICAL:
        target = to_network_space(target)
    per_iter: List[float] = []
    total = torch.zeros(())
    for w, state in zip(weights, trajectory.network_states[1:]):
        li = reconstruction_loss(state, target, unknown_mask)
        per_iter.append(float(li.detach()))
        total = total + w * li
    return LossReport(
        per_iteration=per_iter, total=float(total.detach()), tensor_total=total
    )


def batch_tensors(
    samples: Sequence[MattingSample],
) -> Tuple[torch.Tensor, MattingState, MattingState, torch.Tensor]:
    """Stack samples into (image, x0, target, unknown_mask) batched tensors."""
    if not samples:
        raise ParameterError("empty batch")
    images, x0s, targets, masks = [], [], [], []
    for s in samples:
        if not s.unknown_mask().any():
            raise ValidationError(f"sample seed={s.seed} has an empty unknown region")
        image = chw(s.image)
        trimap = chw(s.trimap.astype(np.float32)).to(torch.uint8)
        x0 = init_state(image, trimap, chw(s.initial_alpha))
        target = MattingState.from_maps(chw(s.fg), chw(s.bg), chw(s.alpha), CANONICAL)
        images.append(image.unsqueeze(0))
        x0s.append(x0.x)
        targets.append(target.x)
        masks.append(chw(s.unknown_mask().astype(np.float32)).unsqueeze(0))
    return (
        torch.cat(images),
        MattingState(torch.cat(x0s), CANONICAL),
        MattingState(torch.cat(targets), CANONICAL),
        torch.cat(masks),
    )


ExtraLoss = Callable[["Trajectory", MattingState, torch.Tensor], torch.Tensor]


def train_step(
    net: RimNet,
    batch: Sequence[MattingSample],
    config: TrainConfig,
    moments: AdamMoments,
    step: int,
    extra_loss: Optional[ExtraLoss] = None,
) -> LossReport:
    """One optimization step over a batch; skips (and logs) non-finite losses.

    ``extra_loss(trajectory, target, unknown_mask)`` may contribute an
    additional differentiable term (an adversarial critic, a prior, ...)
    without any change to the reconstruction path.
    """
    images, x0, target, unknown = batch_tensors(batch)
    net.power_iterate(1)
    seeds = [s.seed for s in batch]
    try:
        trajectory = run_inference(images, x0, net, config.iteration)
        report = total_loss(
            trajectory, target, unknown, config.iteration.weights_vector()
        )
        if extra_loss is not None:
            report.tensor_total = report.tensor_total + extra_loss(
                trajectory, target, unknown
            )
            report.total = float(report.tensor_total.detach())
    except NonFiniteError as e:
        log.warning("step %d skipped (%s); sample seeds %s", step, e, seeds)
        return LossReport(per_iteration=[], total=float("nan"), step=step, skipped=True)
    if not np.isfinite(report.total):
        log.warning("step %d skipped (non-finite loss); sample seeds %s", step, seeds)
        report.step = step
        report.skipped = True
        return report
    params = dict(net.named_parameters())
    grads = backward(report.tensor_total, params)
    if config.learning_rate > 0:
        adam_step(params, grads, moments, lr=config.learning_rate, t=step)
    report.step = step
    # drop the graph-bearing scalar: callers of train_step only need floats,
    # and retaining it would keep the whole unrolled graph alive per step
    report.tensor_total = None
    return report


def batch_seeds_for(seed: int, step: int, batch_size: int, pool_size: int) -> List[int]:
    """Deterministic per-step draw of sample seeds from a pool of `pool_size` indices."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xBA7C4, step)))
    picks = rng.integers(0, pool_size, size=batch_size)
    return [sample_seed_for(seed, int(i)) for i in picks]


WEIGHTS_ONLY = "weights"


def save_checkpoint(
    path: str | Path,
    net: RimNet,
    moments: Optional[AdamMoments] = None,
    step: int = 0,
) -> None:
    tensors: Dict[str, np.ndarray] = {
        name: t.detach().cpu().numpy() for name, t in net.state_dict().items()
    }
    if moments is not None:
        for name, t in moments.m.items():
            tensors[f"adam.m.{name}"] = t.detach().cpu().numpy()
        for name, t in moments.v.items():
            tensors[f"adam.v.{name}"] = t.detach().cpu().numpy()
    tensors["meta.step"] = np.array([float(step)], dtype=np.float32)
    ckpt.write_tensors(path, tensors)


def load_checkpoint(
    path: str | Path, net: Optional[RimNet] = None
) -> Tuple[RimNet, Optional[AdamMoments], int]:
    """Restore weights (and optimizer moments when present) from a RIMW file."""
    tensors = ckpt.read_tensors(path)
    if net is None:
        net = RimNet()
    state = net.state_dict()
    missing = [k for k in state if k not in tensors]
    if missing:
        raise SchemaError(f"checkpoint {path} is missing tensors: {missing}")
    net.load_state_dict(
        {k: torch.from_numpy(tensors[k]).reshape(state[k].shape) for k in state}
    )
    moments: Optional[AdamMoments] = None
    if any(k.startswith("adam.m.") for k in tensors):
        m = {k[len("adam.m.") :]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith("adam.m.")}
        v = {k[len("adam.v.") :]: torch.from_numpy(v_) for k, v_ in tensors.items() if k.startswith("adam.v.")}
        params = dict(net.named_parameters())
        missing_m = [k for k in params if k not in m or k not in v]
        if missing_m:
            raise SchemaError(f"checkpoint {path} has partial optimizer state: {missing_m}")
        moments = AdamMoments(
            m={k: m[k].reshape(params[k].shape) for k in params},
            v={k: v[k].reshape(params[k].shape) for k in params},
        )
    step = int(tensors.get("meta.step", np.zeros(1))[0])
    return net, moments, step


@dataclass
class TrainResult:
    steps_run: int
    reports: List[LossReport]
    final_checkpoint: Optional[Path]


def train_loop(
    net: RimNet,
    train_config: TrainConfig,
    augment_config: AugmentConfig,
    pool_size: int,
    out_dir: Optional[str | Path] = None,
    moments: Optional[AdamMoments] = None,
    start_step: int = 1,
    log_every: int = 25,
) -> TrainResult:
    """Run (or resume) training; writes a CSV loss log and periodic checkpoints."""
    if moments is None:
        moments = AdamMoments.zeros_like(dict(net.named_parameters()))
    out = Path(out_dir) if out_dir is not None else None
    writer = None
    csv_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "train_log.csv"
        new_file = not log_path.exists()
        csv_file = open(log_path, "a", newline="")
        writer = csv.writer(csv_file)
        if new_file:
            writer.writerow(
                ["step"]
                + [f"loss_iter_{i+1}" for i in range(train_config.iteration.iterations)]
                + ["total", "wall_time_s"]
            )
    reports: List[LossReport] = []
    final_path: Optional[Path] = None
    t0 = time.time()
    try:
        for step in range(start_step, train_config.total_steps + 1):
            seeds = batch_seeds_for(
                train_config.seed, step, train_config.batch_size, pool_size
            )
            batch = [make_sample(augment_config, s) for s in seeds]
            report = train_step(net, batch, train_config, moments, step)
            reports.append(report)
            if writer is not None:
                writer.writerow(
                    [step]
                    + [f"{v:.6f}" for v in report.per_iteration]
                    + [f"{report.total:.6f}", f"{time.time() - t0:.2f}"]
                )
                csv_file.flush()
            if log_every and step % log_every == 0:
                log.info("step %d total loss %.5f", step, report.total)
            if out is not None and (
                step % train_config.checkpoint_every == 0
                or step == train_config.total_steps
            ):
                save_checkpoint(out / f"step_{step:06d}.rimw", net, moments, step)
        if out is not None:
            final_path = out / "final.rimw"
            save_checkpoint(final_path, net, moments, train_config.total_steps)
    finally:
        if csv_file is not None:
            csv_file.close()
    return TrainResult(
        steps_run=len(reports), reports=reports, final_checkpoint=final_path
    )
