"""Command-line entry point: gen, train, eval, compare, render.

Exit codes: 0 success, 1 validation error, 2 runtime/training error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image

from nerfcl.continual import KINDS, StrategyConfig, run_sequence
from nerfcl.errors import ConfigError, DatasetError, DomainError, ProtocolError, TrainingError
from nerfcl.evaluation import checkpoint_steps, compare_summaries, evaluate_sequence, read_report, summarize, \
    write_report
from nerfcl.field import FieldConfig, load_checkpoint
from nerfcl.render import CameraParams, render_image
from nerfcl.scenes import default_scene, appearance_only_scene, generate_dataset, load_dataset, load_scene_spec

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_IO = 0, 1, 2, 3
RUN_CONFIG = "config.json"
TIMING = "timing.json"
BUILTIN_SCENES = {"default": default_scene, "appearance": appearance_only_scene}

log = logging.getLogger("nerfcl")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# Experiment config

_KEYS = {
    "dataset": str, "output": str, "strategy": str, "label": str, "buffer_capacity": str,
    "buffer_policy": str, "backbone": str, "reinit_per_step": str, "use_embeddings": bool,
    "per_image_appearance": bool, "iters_per_step": int, "batch_rays": int, "n_samples": int,
    "replay_mode": str, "ewc_lambda": float, "seed": int,
}
_REQUIRED = ("dataset", "output")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: Path
    output: Path
    label: str
    strategy: StrategyConfig
    field: FieldConfig
    seed: int

    def resolved(self, digest: str) -> dict:
        s = self.strategy
        return {
            "dataset": str(self.dataset), "dataset_digest": digest, "output": str(self.output),
            "label": self.label, "seed": self.seed, "strategy": s.kind,
            "buffer_capacity": s.buffer_capacity, "buffer_policy": s.buffer_policy,
            "reinit_per_step": s.reinit(self.field), "iters_per_step": s.iters_per_step,
            "batch_rays": s.batch_rays, "n_samples": s.n_samples, "replay_mode": s.replay_mode,
            "ewc_lambda": s.ewc_lambda, "field": self.field.to_dict(),
        }


def parse_capacity(text: str):
    text = text.strip()
    if text.endswith("%"):
        try:
            float(text[:-1])
        except ValueError:
            raise ConfigError(f"buffer_capacity: bad percentage {text!r}") from None
        return text
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"buffer_capacity must be an integer or a percentage, got {text!r}") from None


def load_experiment_config(path, overrides=None) -> ExperimentConfig:
    """Read a ``[experiment]`` key = value file; see data/config_schema.ini."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"config file not found: {path}")
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if "experiment" not in cp:
        raise ConfigError(f"{path}: missing [experiment] section")
    sec = cp["experiment"]
    raw = dict(sec)
    raw.update(overrides or {})
    unknown = sorted(set(raw) - set(_KEYS))
    if unknown:
        raise ConfigError(f"{path}: unknown keys {', '.join(unknown)}")
    missing = [k for k in _REQUIRED if k not in raw]
    if missing:
        raise ConfigError(f"{path}: missing required keys {', '.join(missing)}")
    vals = {}
    for key, text in raw.items():
        kind = _KEYS[key]
        try:
            if kind is bool:
                vals[key] = cp.BOOLEAN_STATES[str(text).lower()]
            else:
                vals[key] = kind(text)
        except (KeyError, ValueError):
            raise ConfigError(f"{path}: {key} = {text!r} is not a valid {kind.__name__}") from None
    kind = vals.get("strategy", "CLNeRF")
    if kind not in KINDS:
        raise ConfigError(f"unknown strategy {kind!r}; valid kinds: {', '.join(KINDS)}")
    reinit = vals.get("reinit_per_step", "auto").lower()
    if reinit not in ("auto", "true", "false"):
        raise ConfigError("reinit_per_step must be auto, true or false")
    try:
        field_cfg = FieldConfig(encoder=vals.get("backbone", "hash_grid"),
                                use_embeddings=vals.get("use_embeddings", True),
                                per_image_appearance=vals.get("per_image_appearance", False))
    except DomainError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    seed = vals.get("seed", 0)
    strategy = StrategyConfig(
        kind=kind, buffer_capacity=parse_capacity(vals.get("buffer_capacity", "10")),
        buffer_policy=vals.get("buffer_policy", "reservoir"),
        reinit_per_step=None if reinit == "auto" else reinit == "true",
        iters_per_step=vals.get("iters_per_step", 1000), batch_rays=vals.get("batch_rays", 512),
        n_samples=vals.get("n_samples", 32), replay_mode=vals.get("replay_mode", "offline_cache"),
        ewc_lambda=vals.get("ewc_lambda", 1e5))
    strategy.validate_for(field_cfg)
    return ExperimentConfig(Path(vals["dataset"]), Path(vals["output"]), vals.get("label", kind),
                            strategy, field_cfg, seed)


def _field_for_dataset(cfg: FieldConfig, ds) -> FieldConfig:
    d = cfg.to_dict()
    d.update(bbox_min=list(ds.bbox_min), bbox_max=list(ds.bbox_max), background=list(ds.background))
    return FieldConfig.from_dict(d)


def _write_json(path: Path, obj):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    tmp.replace(path)


# ---------------------------------------------------------------------------
# Commands


def cmd_gen(args) -> int:
    if args.spec.startswith("builtin:"):
        name = args.spec.split(":", 1)[1]
        if name not in BUILTIN_SCENES:
            raise ConfigError(f"unknown built-in scene {name!r}; choose from {', '.join(BUILTIN_SCENES)}")
        spec = BUILTIN_SCENES[name]()
    else:
        spec = load_scene_spec(args.spec)
    manifest = generate_dataset(spec, args.cameras_per_step, args.seed, args.out)
    print(manifest.path)
    return EXIT_OK


def train_from_config(cfg: ExperimentConfig):
    ds = load_dataset(cfg.dataset)
    field_cfg = _field_for_dataset(cfg.field, ds)
    cfg.output.mkdir(parents=True, exist_ok=True)
    _write_json(cfg.output / RUN_CONFIG, cfg.resolved(ds.digest))
    result = run_sequence(ds, cfg.strategy, field_cfg, cfg.seed, cfg.output)
    _write_json(cfg.output / TIMING, {"wall_time": result.wall_time})
    meta = json.loads((cfg.output / RUN_CONFIG).read_text())
    meta["buffer_bytes"] = result.buffer_bytes
    _write_json(cfg.output / RUN_CONFIG, meta)
    return result


def cmd_train(args) -> int:
    cfg = load_experiment_config(args.config)
    result = train_from_config(cfg)
    for p in result.checkpoints:
        print(p)
    return EXIT_OK


def _run_meta(run_dir: Path) -> dict:
    path = run_dir / RUN_CONFIG
    if not path.exists():
        raise DatasetError(f"{run_dir}: no {RUN_CONFIG}; is this a train output directory?")
    return json.loads(path.read_text())


def evaluate_run(run_dir, dataset=None, workers: int = 1, n_samples: int = 64):
    run_dir = Path(run_dir)
    meta = _run_meta(run_dir)
    ds = load_dataset(dataset if dataset is not None else meta["dataset"])
    if ds.digest != meta["dataset_digest"]:
        raise ConfigError(f"dataset digest {ds.digest[:12]} does not match the run's {meta['dataset_digest'][:12]}")
    ckpts = sorted(run_dir.glob("ckpt_t*.ctrd"))
    if not ckpts:
        raise ProtocolError(f"{run_dir}: no checkpoints")
    timing = run_dir / TIMING
    wall = json.loads(timing.read_text())["wall_time"] if timing.exists() else 0.0
    records, summary = evaluate_sequence(ckpts, ds, meta["label"], n_samples,
                                         meta.get("buffer_bytes", 0), wall, workers=workers)
    write_report(records, run_dir)
    return records, summary


def cmd_eval(args) -> int:
    _, summary = evaluate_run(args.run_dir, args.dataset, args.threads, args.samples)
    print(f"{summary.strategy} mean_psnr={summary.mean_psnr:.3f} mean_ssim={summary.mean_ssim:.4f}")
    return EXIT_OK


def compare_runs(run_dirs) -> str:
    digests = {}
    summaries = []
    for rd in map(Path, run_dirs):
        meta = _run_meta(rd)
        digests[str(rd)] = meta["dataset_digest"]
        summaries.extend(summarize(read_report(rd)).values())
    if len(set(digests.values())) > 1:
        lines = "\n".join(f"  {k}: {v}" for k, v in digests.items())
        raise ConfigError(f"runs were trained on different datasets:\n{lines}")
    return compare_summaries(summaries)


def cmd_compare(args) -> int:
    if len(args.run_dirs) < 2:
        raise ConfigError("compare needs at least two run directories")
    table = compare_runs(args.run_dirs)
    if args.out:
        Path(args.out).write_text(table)
    print(table, end="")
    return EXIT_OK


def cmd_render(args) -> int:
    params = load_checkpoint(args.checkpoint)
    try:
        cam = CameraParams.from_dict(json.loads(Path(args.camera).read_text()))
    except FileNotFoundError:
        raise DatasetError(f"camera file not found: {args.camera}") from None
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{args.camera}: invalid camera ({exc})") from None
    if not 0 <= args.timestep < params.n_timesteps:
        raise ProtocolError(f"timestep {args.timestep} is not registered; valid ids: "
                            f"{', '.join(map(str, range(params.n_timesteps)))}")
    img = render_image(params, cam, args.timestep, args.samples, workers=args.threads)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)).save(out, optimize=False)
    print(out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nerfcl", description="Continual radiance-field experiments on synthetic scenes.")
    p.add_argument("--threads", type=int, default=1, help="worker threads for rendering (results do not change)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="render a synthetic dataset")
    g.add_argument("spec", help="scene JSON file, or builtin:default / builtin:appearance")
    g.add_argument("out", help="output dataset directory")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--cameras-per-step", type=int, default=9)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a strategy over a dataset",
                       description="Config keys are documented in nerfcl/data/config_schema.ini.")
    t.add_argument("config", help="experiment config file ([experiment] key = value)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a run's checkpoints on the held-out views")
    e.add_argument("run_dir")
    e.add_argument("--dataset", default=None, help="defaults to the dataset recorded in the run")
    e.add_argument("--samples", type=int, default=64)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="merge evaluated runs into one table")
    c.add_argument("run_dirs", nargs="+")
    c.add_argument("--out", default=None)
    c.set_defaults(func=cmd_compare)

    r = sub.add_parser("render", help="render one view from a checkpoint")
    r.add_argument("checkpoint")
    r.add_argument("camera", help="JSON file with a camera (same fields as the manifest)")
    r.add_argument("timestep", type=int)
    r.add_argument("out", help="output PNG")
    r.add_argument("--samples", type=int, default=64)
    r.set_defaults(func=cmd_render)
    return p


def schema_path() -> Path:
    return Path(str(resources.files("nerfcl") / "data" / "config_schema.ini"))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.threads < 1:
        print("nerfcl: --threads must be >= 1", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        return args.func(args)
    except (ConfigError, DomainError) as exc:
        print(f"nerfcl: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except DatasetError as exc:
        print(f"nerfcl: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TrainingError, ProtocolError) as exc:
        print(f"nerfcl: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"nerfcl: error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
