"""Command-line pipeline: simulate test pairs, register them, evaluate metrics.

Subcommands
    register  --fixed F --moving M [--config C] --out-field P --out-warped W
              [--lambda L] [--similarity dmi|ncc|mse] [--levels N] [--iters N]
    simulate  --base B --axis x|y|z --magnitude V --scale S --seed N
              --out-prefix P
    evaluate  --a A --b B [--bins N]

Configs are flat ``key=value`` text files (``#`` comments allowed); explicit
flags override file values, unknown keys are hard errors.  Every command
computes everything first and then commits its output files by
write-to-temp-then-rename, so a failed run leaves no partial outputs.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import simeval
from .losses import ParzenConfig
from .registration import RegistrationConfig, register
from .volume import Volume3D, normalize_intensities, read_volume, volume_file_blobs, write_volume
from .warp import warp

__all__ = ["main", "entrypoint", "RunManifest", "parse_config_file", "build_registration_config"]

_CONFIG_KEYS = {
    "lambda": ("lam", float),
    "levels": ("levels", int),
    "iters_per_level": ("iters_per_level", int),
    "step_size": ("step_size", float),
    "adam_beta1": ("adam_beta1", float),
    "adam_beta2": ("adam_beta2", float),
    "adam_eps": ("adam_eps", float),
    "converge_tol": ("converge_tol", float),
    "similarity": ("similarity", str),
    "parzen_num_bins": ("parzen_num_bins", int),
    "parzen_sigma": ("parzen_sigma", float),
    "parzen_sample_stride": ("parzen_sample_stride", int),
}


class CliError(Exception):
    """User-facing command failure; message goes to stderr, exit code 1."""


@dataclass
class RunManifest:
    """Flat record of one command: config, paths, metrics, timing."""

    command: str
    config: dict = dc_field(default_factory=dict)
    inputs: dict = dc_field(default_factory=dict)
    outputs: dict = dc_field(default_factory=dict)
    metrics: dict = dc_field(default_factory=dict)
    duration_s: float = 0.0

    def lines(self) -> list[str]:
        out = [f"# mireg {self.command} manifest", f"command={self.command}"]
        for section, values in (
            ("config", self.config),
            ("input", self.inputs),
            ("output", self.outputs),
            ("metric", self.metrics),
        ):
            for key, val in values.items():
                if isinstance(val, float):
                    out.append(f"{section}.{key}={val:.6f}")
                else:
                    out.append(f"{section}.{key}={val}")
        out.append(f"duration_s={self.duration_s:.6f}")
        return out

    def text(self) -> str:
        return "\n".join(self.lines()) + "\n"


def parse_config_file(path: str) -> dict[str, str]:
    """Read a flat key=value config file; unknown keys are hard errors."""
    values: dict[str, str] = {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = f.readlines()
    except OSError as e:
        raise CliError(f"cannot read config {path}: {e}") from e
    for lineno, line in enumerate(raw, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not sep or not key:
            raise CliError(f"{path}:{lineno}: expected key=value, got {line!r}")
        if key not in _CONFIG_KEYS:
            raise CliError(f"{path}:{lineno}: unknown config key {key!r}")
        if not value:
            raise CliError(f"{path}:{lineno}: missing value for key {key!r}")
        values[key] = value
    return values


def build_registration_config(values: dict[str, str]) -> RegistrationConfig:
    """Turn string key=value settings into a validated RegistrationConfig."""
    kwargs: dict = {}
    parzen_kwargs: dict = {}
    for key, raw in values.items():
        if key not in _CONFIG_KEYS:
            raise CliError(f"unknown config key {key!r}")
        attr, conv = _CONFIG_KEYS[key]
        try:
            val = conv(raw)
        except ValueError as e:
            raise CliError(f"config key {key!r}: bad value {raw!r}") from e
        if attr.startswith("parzen_"):
            parzen_kwargs[attr[len("parzen_"):]] = val
        else:
            kwargs[attr] = val
    try:
        return RegistrationConfig(parzen=ParzenConfig(**parzen_kwargs), **kwargs)
    except ValueError as e:
        raise CliError(f"invalid configuration: {e}") from e


def _load_normalized(path: str) -> Volume3D:
    """Read a volume; intensities outside [0, 1] get percentile-normalized."""
    try:
        v = read_volume(path)
    except Exception as e:
        raise CliError(f"cannot read volume {path}: {e}") from e
    if v.data.min() < 0.0 or v.data.max() > 1.0:
        v = normalize_intensities(v)
    return v


def _commit(blobs: list[tuple[str, bytes]]) -> None:
    for path, data in blobs:
        tmp = path + ".part"
        with open(tmp, "wb") as f:
            f.write(data)
        os.replace(tmp, path)


def _field_blobs(field, spacing, prefix: str) -> tuple[list[tuple[str, bytes]], dict[str, str]]:
    blobs: list[tuple[str, bytes]] = []
    paths: dict[str, str] = {}
    for c, suffix in enumerate(("dx", "dy", "dz")):
        path = f"{prefix}.{suffix}.nii"
        vol = Volume3D(field.vectors[..., c], spacing)
        blobs.extend(volume_file_blobs(vol, path))
        paths[f"field_{suffix}"] = path
    return blobs, paths


def _pair_metrics(a: Volume3D, b: Volume3D, num_bins: int = 32) -> dict[str, float]:
    out = {"mi": simeval.metric_mi(a, b, num_bins)}
    out["ncc_abs"] = abs(simeval.metric_ncc(a, b))
    out["ssim"] = simeval.metric_ssim(a, b)
    return out


def _cmd_register(args) -> RunManifest:
    t0 = time.perf_counter()
    values = parse_config_file(args.config) if args.config else {}
    for key, flag in (
        ("lambda", args.lam),
        ("similarity", args.similarity),
        ("levels", args.levels),
        ("iters_per_level", args.iters),
    ):
        if flag is not None:
            values[key] = str(flag)
    cfg = build_registration_config(values)

    fixed = _load_normalized(args.fixed)
    moving = _load_normalized(args.moving)
    if fixed.dims != moving.dims:
        raise CliError(f"fixed dims {fixed.dims} != moving dims {moving.dims}")

    pre = _pair_metrics(fixed, moving)
    try:
        field, report = register(fixed, moving, cfg)
    except ValueError as e:
        raise CliError(str(e)) from e
    warped = warp(moving, field)
    post = _pair_metrics(fixed, warped)

    blobs, field_paths = _field_blobs(field, fixed.spacing, args.out_field)
    blobs.extend(volume_file_blobs(warped, args.out_warped))

    manifest = RunManifest(
        command="register",
        config={
            "lambda": cfg.resolved_lambda(),
            "levels": cfg.levels,
            "iters_per_level": cfg.iters_per_level,
            "step_size": cfg.step_size,
            "adam_beta1": cfg.adam_beta1,
            "adam_beta2": cfg.adam_beta2,
            "adam_eps": cfg.adam_eps,
            "converge_tol": cfg.converge_tol,
            "similarity": cfg.similarity,
            "parzen_num_bins": cfg.parzen.num_bins,
            "parzen_sigma": cfg.parzen.sigma,
            "parzen_sample_stride": cfg.parzen.sample_stride,
        },
        inputs={"fixed": args.fixed, "moving": args.moving},
        outputs={**field_paths, "warped": args.out_warped},
        metrics={
            **{f"pre_{k}": v for k, v in pre.items()},
            **{f"post_{k}": v for k, v in post.items()},
            "field_mean_magnitude": float(
                np.mean(np.sqrt(np.sum(field.vectors**2, axis=-1)))
            ),
            "register_duration_s": report.duration_s,
        },
    )
    manifest.duration_s = time.perf_counter() - t0
    manifest_path = f"{args.out_field}.manifest.txt"
    blobs.append((manifest_path, manifest.text().encode("utf-8")))
    _commit(blobs)
    return manifest


def _cmd_simulate(args) -> RunManifest:
    t0 = time.perf_counter()
    base = _load_normalized(args.base)
    spec = simeval.DistortionSpec(
        phase_axis=args.axis,
        max_magnitude=args.magnitude,
        smoothness_scale=args.scale,
        seed=args.seed,
    )
    t1, b0 = simeval.make_inter_modality_pair(base, args.seed)
    truth = simeval.simulate_distortion(base.dims, spec)
    try:
        distorting = simeval.invert_field(truth)
    except ValueError as e:
        raise CliError(str(e)) from e
    distorted = warp(b0, distorting)

    prefix = args.out_prefix
    t1_path = f"{prefix}.t1.nii"
    b0_path = f"{prefix}.b0_distorted.nii"
    blobs = volume_file_blobs(t1, t1_path) + volume_file_blobs(distorted, b0_path)
    field_blobs, field_paths = _field_blobs(truth, base.spacing, f"{prefix}.field")
    blobs.extend(field_blobs)

    manifest = RunManifest(
        command="simulate",
        config={
            "axis": spec.phase_axis,
            "magnitude": spec.max_magnitude,
            "scale": spec.smoothness_scale,
            "seed": spec.seed,
        },
        inputs={"base": args.base},
        outputs={"t1": t1_path, "b0_distorted": b0_path, **field_paths},
        metrics={
            "field_max_abs": float(np.abs(truth.vectors).max()),
            "pre_mi": simeval.metric_mi(t1, distorted),
            "pre_ncc_abs": abs(simeval.metric_ncc(t1, distorted)),
            "pre_ssim": simeval.metric_ssim(t1, distorted),
        },
    )
    manifest.duration_s = time.perf_counter() - t0
    blobs.append((f"{prefix}.manifest.txt", manifest.text().encode("utf-8")))
    _commit(blobs)
    return manifest


def _cmd_evaluate(args) -> RunManifest:
    t0 = time.perf_counter()
    a = _load_normalized(args.a)
    b = _load_normalized(args.b)
    if a.dims != b.dims:
        raise CliError(f"dims differ: {a.dims} vs {b.dims}")
    try:
        metrics = _pair_metrics(a, b, args.bins)
    except ValueError as e:
        raise CliError(str(e)) from e
    for name in ("mi", "ncc_abs", "ssim"):
        print(f"{name}={metrics[name]:.6f}")
    manifest = RunManifest(
        command="evaluate",
        config={"bins": args.bins},
        inputs={"a": args.a, "b": args.b},
        metrics=metrics,
    )
    manifest.duration_s = time.perf_counter() - t0
    return manifest


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mireg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("register", help="register a moving volume onto a fixed one")
    p.add_argument("--fixed", required=True, help="fixed (undistorted) volume path")
    p.add_argument("--moving", required=True, help="moving (distorted) volume path")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--out-field", required=True, help="output prefix for the field components")
    p.add_argument("--out-warped", required=True, help="output path for the warped moving volume")
    p.add_argument("--lambda", dest="lam", type=float, help="smoothness weight")
    p.add_argument("--similarity", choices=("dmi", "ncc", "mse"), help="similarity loss")
    p.add_argument("--levels", type=int, help="pyramid levels")
    p.add_argument("--iters", type=int, help="iterations per level")
    p.set_defaults(func=_cmd_register)

    p = sub.add_parser("simulate", help="make a distorted inter-modality pair with ground truth")
    p.add_argument("--base", required=True, help="base volume path")
    p.add_argument("--axis", choices=("x", "y", "z"), default="y", help="phase-encoding axis")
    p.add_argument("--magnitude", type=float, required=True, help="max displacement in voxels")
    p.add_argument("--scale", type=float, default=32.0, help="shortest field wavelength in voxels")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--out-prefix", required=True, help="output path prefix")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("evaluate", help="print MI, |NCC|, SSIM for a volume pair")
    p.add_argument("--a", required=True, help="first volume path")
    p.add_argument("--b", required=True, help="second volume path")
    p.add_argument("--bins", type=int, default=32, help="MI histogram bins")
    p.set_defaults(func=_cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except CliError as e:
        print(f"mireg {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


def entrypoint() -> None:
    sys.exit(main())
