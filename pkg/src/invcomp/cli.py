"""Command-line entry point: datagen, train, infer, eval, probe, serve.

Configuration comes from an INI file (key = value sections) with every field
overridable on the command line via ``--set section.key=value``.  Unknown keys
are rejected and the effective configuration is echoed to the log before any
work starts.  All randomness flows from [run].seed.
"""

from __future__ import annotations

import argparse
import configparser
import io
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

log = logging.getLogger("invcomp")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_NO_DATA = 3


_SCHEMA = {
    "run": {"seed": int},
    "iteration": {
        "iterations": int,
        "sigma": float,
        "gradient_variant": str,
        "loss_weights": str,
        "detach_gradient_features": bool,
    },
    "train": {
        "learning_rate": float,
        "total_steps": int,
        "batch_size": int,
        "crop_size": int,
        "checkpoint_every": int,
        "pool_size": int,
    },
    "augment": {
        "merge_prob": float,
        "resize_prob": float,
        "resize_size": int,
        "rotation_deg": float,
        "scale_min": float,
        "scale_max": float,
        "shear_deg": float,
        "hflip_prob": float,
        "dilation_min": int,
        "dilation_max": int,
        "crop": int,
        "hue_jitter": float,
        "sat_jitter": float,
        "val_jitter": float,
        "base_size": int,
    },
    "tile": {"tile": int, "overlap": int, "workers": int},
}

_DEFAULTS: Dict[str, Dict[str, str]] = {
    "run": {"seed": "0"},
    "iteration": {
        "iterations": "5",
        "sigma": "1.0",
        "gradient_variant": "analytic",
        "loss_weights": "",
        "detach_gradient_features": "false",
    },
    "train": {
        "learning_rate": "1e-4",
        "total_steps": "20000",
        "batch_size": "4",
        "crop_size": "512",
        "checkpoint_every": "500",
        "pool_size": "4000",
    },
    "augment": {
        "merge_prob": "0.5",
        "resize_prob": "0.25",
        "resize_size": "640",
        "rotation_deg": "30",
        "scale_min": "0.8",
        "scale_max": "1.25",
        "shear_deg": "10",
        "hflip_prob": "0.5",
        "dilation_min": "1",
        "dilation_max": "29",
        "crop": "512",
        "hue_jitter": "0.1",
        "sat_jitter": "0.2",
        "val_jitter": "0.2",
        "base_size": "800",
    },
    "tile": {"tile": "512", "overlap": "11", "workers": "1"},
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    values: Dict[str, Dict[str, str]] = field(default_factory=dict)

    @classmethod
    def load(cls, config_path: Optional[str], overrides: List[str]) -> "RunConfig":
        values = {s: dict(kv) for s, kv in _DEFAULTS.items()}
        if config_path:
            parser = configparser.ConfigParser()
            read = parser.read(config_path)
            if not read:
                raise ConfigError(f"cannot read config file {config_path}")
            for section in parser.sections():
                if section not in _SCHEMA:
                    raise ConfigError(f"unknown config section [{section}]")
                for key, value in parser.items(section):
                    if key not in _SCHEMA[section]:
                        raise ConfigError(f"unknown config key {section}.{key}")
                    values[section][key] = value
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override '{item}' is not section.key=value")
            dotted, value = item.split("=", 1)
            if "." not in dotted:
                raise ConfigError(f"override '{item}' is not section.key=value")
            section, key = dotted.split(".", 1)
            if section not in _SCHEMA or key not in _SCHEMA[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            values[section][key] = value
        cfg = cls(values)
        cfg._validate()
        return cfg

    def _validate(self):
        for section, keys in self.values.items():
            for key, raw in keys.items():
                self._parse(section, key, raw)

    def _parse(self, section: str, key: str, raw: str):
        kind = _SCHEMA[section][key]
        try:
            if kind is bool:
                if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(raw)
                return raw.lower() in ("true", "1", "yes")
            return kind(raw)
        except ValueError:
            raise ConfigError(f"bad value for {section}.{key}: {raw!r}") from None

    def get(self, section: str, key: str):
        return self._parse(section, key, self.values[section][key])

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        for section, keys in self.values.items():
            parser[section] = keys
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def seed(self) -> int:
        return self.get("run", "seed")

    def iteration_config(self):
        from .compositing import GradientVariant
        from .rim import IterationConfig

        weights_raw = self.values["iteration"]["loss_weights"].strip()
        weights = (
            [float(w) for w in weights_raw.split(",")] if weights_raw else None
        )
        return IterationConfig(
            iterations=self.get("iteration", "iterations"),
            sigma=self.get("iteration", "sigma"),
            gradient_variant=GradientVariant(self.get("iteration", "gradient_variant")),
            loss_weights=weights,
            detach_gradient_features=self.get("iteration", "detach_gradient_features"),
        )

    def augment_config(self):
        from .datagen import AugmentConfig

        g = lambda k: self.get("augment", k)
        return AugmentConfig(
            merge_prob=g("merge_prob"),
            resize_prob=g("resize_prob"),
            resize_size=g("resize_size"),
            rotation_deg=g("rotation_deg"),
            scale_range=(g("scale_min"), g("scale_max")),
            shear_deg=g("shear_deg"),
            hflip_prob=g("hflip_prob"),
            dilation_range=(g("dilation_min"), g("dilation_max")),
            crop=g("crop"),
            hue_jitter=g("hue_jitter"),
            sat_jitter=g("sat_jitter"),
            val_jitter=g("val_jitter"),
            base_size=g("base_size"),
            seed=self.seed(),
        )

    def train_config(self):
        from .training import TrainConfig

        return TrainConfig(
            learning_rate=self.get("train", "learning_rate"),
            total_steps=self.get("train", "total_steps"),
            batch_size=self.get("train", "batch_size"),
            crop_size=self.get("train", "crop_size"),
            seed=self.seed(),
            iteration=self.iteration_config(),
            checkpoint_every=self.get("train", "checkpoint_every"),
        )


def _echo_config(cfg: RunConfig):
    log.info("effective configuration:\n%s", cfg.to_ini())


def cmd_datagen(args) -> int:
    from .datagen import export_dataset

    cfg = RunConfig.load(args.config, args.set or [])
    _echo_config(cfg)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        log.error("output directory %s is not writable: %s", out, e)
        return EXIT_FAILURE
    rows = export_dataset(cfg.augment_config(), args.count, out)
    log.info("wrote %d samples and manifest to %s", len(rows), out)
    return EXIT_OK


def cmd_train(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .datagen import load_manifest
    from .rim import RimNet
    from .training import load_checkpoint, train_loop

    cfg = RunConfig.load(args.config, args.set or [])
    if args.steps is not None:
        cfg.values["train"]["total_steps"] = str(args.steps)
    _echo_config(cfg)
    data_dir = Path(args.data)
    try:
        aug_config, rows = load_manifest(data_dir)
    except FileNotFoundError as e:
        log.error("dataset not found: %s", e)
        return EXIT_FAILURE
    if not rows:
        log.error("dataset %s has an empty manifest", data_dir)
        return EXIT_NO_DATA
    train_config = cfg.train_config()
    moments = None
    start_step = 1
    if args.resume:
        net, moments, step = load_checkpoint(args.resume)
        start_step = step + 1
        log.info("resumed from %s at step %d", args.resume, step)
    else:
        net = RimNet(seed=cfg.seed())
    result = train_loop(
        net,
        train_config,
        aug_config,
        pool_size=len(rows),
        out_dir=args.out,
        moments=moments,
        start_step=start_step,
    )
    log.info("trained %d steps; final checkpoint %s", result.steps_run, result.final_checkpoint)

    log_path = Path(args.out) / "train_log.csv"
    if log_path.exists():
        import csv as _csv

        with open(log_path) as f:
            reader = _csv.DictReader(f)
            steps, totals = [], []
            for row in reader:
                steps.append(int(row["step"]))
                totals.append(float(row["total"]))
        if steps:
            fig, ax = plt.subplots(figsize=(7, 4))
            ax.plot(steps, totals, lw=0.8)
            ax.set_xlabel("step")
            ax.set_ylabel("total loss")
            ax.grid(alpha=0.3)
            fig.tight_layout()
            fig.savefig(Path(args.out) / "loss_curve.png", dpi=130)
            plt.close(fig)
    return EXIT_OK


def cmd_infer(args) -> int:
    import torch

    from . import images
    from .compositing import MattingState, init_state
    from .pipeline import build_tile_plan, infer_tiled
    from .rim import run_inference
    from .training import load_checkpoint

    cfg = RunConfig.load(args.config, args.set or [])
    if args.iterations is not None:
        cfg.values["iteration"]["iterations"] = str(args.iterations)
    if args.gradient_variant is not None:
        cfg.values["iteration"]["gradient_variant"] = args.gradient_variant
    if args.tile is not None:
        cfg.values["tile"]["tile"] = str(args.tile)
    if args.overlap is not None:
        cfg.values["tile"]["overlap"] = str(args.overlap)
    _echo_config(cfg)

    if not Path(args.checkpoint).exists():
        log.error("checkpoint %s does not exist", args.checkpoint)
        return EXIT_FAILURE
    net, _, _ = load_checkpoint(args.checkpoint)

    image = images.load_rgb(args.image)
    alpha = images.load_gray(args.alpha)
    if alpha.shape != image.shape[:2]:
        log.error(
            "alpha resolution %s does not match image %s", alpha.shape, image.shape[:2]
        )
        return EXIT_FAILURE
    trimap_t = None
    if args.trimap:
        trimap = images.load_trimap(args.trimap)
        if trimap.shape != image.shape[:2]:
            log.error("trimap resolution %s does not match image", trimap.shape)
            return EXIT_FAILURE
        import numpy as np

        trimap_t = images.chw(trimap.astype("float32")).to(torch.uint8)

    config = cfg.iteration_config()
    image_t = images.chw(image)
    x0 = init_state(image_t, trimap_t, images.chw(alpha))
    h, w = image.shape[:2]
    tile = cfg.get("tile", "tile")
    if tile and tile < max(h, w):
        from .pipeline import receptive_field_probe

        overlap = cfg.get("tile", "overlap")
        probe = receptive_field_probe(net, iterations=config.iterations)
        log.info(
            "measured influence radius for %d iterations: %d px (recommended overlap %d)",
            config.iterations, probe.radius, probe.recommended_overlap,
        )
        if overlap < probe.radius:
            log.warning(
                "tile overlap %d is below the measured radius %d; seams may deviate",
                overlap, probe.radius,
            )
        plan = build_tile_plan(h, w, tile, overlap)
        final = infer_tiled(
            image_t, x0, net, config, plan, workers=cfg.get("tile", "workers")
        )
    else:
        with torch.no_grad():
            final = run_inference(image_t, x0, net, config).final()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bits = args.bits
    images.save_rgb(out / "foreground.png", images.hwc(final.fg), bits=bits)
    images.save_rgb(out / "background.png", images.hwc(final.bg), bits=bits)
    images.save_gray(out / "alpha.png", images.hwc(final.alpha), bits=bits)
    if args.bg is not None:
        import numpy as np

        from .service import _parse_bg_color

        a = images.hwc(final.alpha)[..., None]
        fg = images.hwc(final.fg)
        bg_color = _parse_bg_color(args.bg)
        comp = a * fg + (1 - a) * np.broadcast_to(bg_color, fg.shape)
        images.save_rgb(out / "composite.png", comp.astype("float32"), bits=bits)
    log.info("wrote outputs to %s", out)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .pipeline import benchmark
    from .training import load_checkpoint

    cfg = RunConfig.load(args.config, args.set or [])
    if args.iterations is not None:
        cfg.values["iteration"]["iterations"] = str(args.iterations)
    _echo_config(cfg)
    if not Path(args.checkpoint).exists():
        log.error("checkpoint %s does not exist", args.checkpoint)
        return EXIT_FAILURE
    net, _, _ = load_checkpoint(args.checkpoint)
    report = benchmark(
        args.data,
        net,
        cfg.iteration_config(),
        out_dir=args.out,
        materialized=args.materialized,
        limit=args.limit,
    )
    if report.evaluated == 0:
        log.error("no samples evaluated (skipped %d)", report.skipped)
        return EXIT_NO_DATA
    table = (Path(args.out) / "table.txt").read_text() if args.out else ""
    print(table or f"evaluated {report.evaluated} samples")
    return EXIT_OK


def cmd_probe(args) -> int:
    from .pipeline import receptive_field_probe
    from .training import load_checkpoint
    from .rim import RimNet

    cfg = RunConfig.load(args.config, args.set or [])
    _echo_config(cfg)
    if args.checkpoint:
        net, _, _ = load_checkpoint(args.checkpoint)
    else:
        net = RimNet(seed=cfg.seed())
        log.info("no checkpoint given; probing freshly initialized weights")
    iterations = args.iterations or cfg.get("iteration", "iterations")
    result = receptive_field_probe(net, iterations=iterations)
    print(f"single-iteration diameter: {result.single_step_diameter} px")
    for t, r in enumerate(result.radii, start=1):
        print(f"iteration {t}: radius {r} px")
    print(f"recommended tile overlap (T={iterations}): {result.recommended_overlap} px")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "probe.json").write_text(
            json.dumps(
                {
                    "radii": result.radii,
                    "single_step_diameter": result.single_step_diameter,
                    "recommended_overlap": result.recommended_overlap,
                    "threshold": result.threshold,
                },
                indent=2,
            )
        )
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(range(1, len(result.radii) + 1), result.radii, "o-")
        ax.set_xlabel("iterations")
        ax.set_ylabel("influence radius (px)")
        ax.grid(alpha=0.3)
        fig.tight_layout()
        fig.savefig(out / "probe_radius.png", dpi=130)
        plt.close(fig)
    return EXIT_OK


def cmd_serve(args) -> int:
    from .service import serve
    from .training import load_checkpoint

    cfg = RunConfig.load(args.config, args.set or [])
    _echo_config(cfg)
    if not Path(args.checkpoint).exists():
        log.error("checkpoint %s does not exist", args.checkpoint)
        return EXIT_FAILURE
    net, _, _ = load_checkpoint(args.checkpoint)
    ui_dir = args.ui
    if ui_dir is None:
        bundled = Path(__file__).resolve().parents[2] / "frontend" / "dist"
        ui_dir = bundled if bundled.is_dir() else None
    serve(net, cfg.iteration_config(), host=args.host, port=args.port, ui_dir=ui_dir)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="invcomp",
        description="Iterative foreground/background color and alpha refinement",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument(
        "--set",
        action="append",
        metavar="SECTION.KEY=VALUE",
        help="override one configuration value (repeatable)",
    )

    p = sub.add_parser("datagen", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--count", type=int, required=True, help="number of samples")
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", parents=[common], help="train on a generated dataset")
    p.add_argument("--data", required=True, help="dataset directory (with manifest)")
    p.add_argument("--out", required=True, help="output directory for checkpoints/logs")
    p.add_argument("--steps", type=int, help="override train.total_steps")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="refine one image")
    p.add_argument("--image", required=True)
    p.add_argument("--alpha", required=True, help="initial alpha estimate")
    p.add_argument("--trimap")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int)
    p.add_argument("--tile", type=int, help="tile size (0 disables tiling)")
    p.add_argument("--overlap", type=int)
    p.add_argument(
        "--gradient-variant", choices=["analytic", "verbatim"], dest="gradient_variant"
    )
    p.add_argument("--bg", help="background for composite output (name or #rrggbb)")
    p.add_argument("--bits", type=int, default=16, choices=[8, 16])
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="benchmark a checkpoint")
    p.add_argument("--data", required=True, help="dataset directory (with manifest)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="report directory")
    p.add_argument("--limit", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument(
        "--materialized", action="store_true", help="read rasters instead of regenerating"
    )
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe", parents=[common], help="measure the receptive field")
    p.add_argument("--checkpoint")
    p.add_argument("--iterations", type=int)
    p.add_argument("--out", help="directory for probe.json and figure")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("serve", parents=[common], help="run the interactive service")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8711)
    p.add_argument("--ui", help="static frontend directory")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as e:
        log.error("%s", e)
        return EXIT_USAGE
    except Exception as e:  # surface a clean message, nonzero exit
        log.error("%s: %s", type(e).__name__, e)
        if args.verbose:
            raise
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
