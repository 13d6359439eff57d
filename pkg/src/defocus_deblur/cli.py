"""Command-line front end: synthesize test scenes, deblur, evaluate, and
inspect estimated kernels.

Exit codes: 0 on success, 1 on any input error, 2 when the solver failed
in every out-of-focus layer.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import image_io
from .feasible_set import effective_rank
from .layer_solver import (
    SolverConfig,
    disk_kernel,
    gaussian_kernel,
    gaussian_pupil_kernel,
    pillbox_kernel,
)
from .pipeline import (
    LayerSet,
    SceneLayer,
    SceneSpec,
    deblur_all,
    evaluate,
    layers_from_defocus_map,
    synthesize,
)
from .solvers import SparsifyingTransform

log = logging.getLogger("defocus_deblur")


class InputError(Exception):
    """User-facing input problem; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits with 2; we reserve that
        raise InputError(message)


# config-file key -> (target, field, type); targets: cfg, admm, pga
_CONFIG_KEYS = {
    "kernel_size": ("cfg", "kernel_size", int),
    "outer_iters": ("cfg", "outer_iters", int),
    "lambda1": ("cfg", "lam1", float),
    "lambda2": ("cfg", "lam2", float),
    "lambda3": ("cfg", "lam3", float),
    "transform": ("cfg", "transform", str),
    "disk_radius_min": ("cfg", "disk_radius_min", int),
    "disk_radius_max": ("cfg", "disk_radius_max", int),
    "lambda2_min": ("cfg", "lam2_min", float),
    "lambda2_max": ("cfg", "lam2_max", float),
    "rank_ratio": ("cfg", "rank_threshold_ratio", float),
    "rho": ("admm", "rho", float),
    "admm_iters": ("admm", "inner_iters", int),
    "cg_iters": ("admm", "cg_iters", int),
    "cg_tol": ("admm", "cg_tol", float),
    "pga_step": ("pga", "initial_step", float),
    "pga_iters": ("pga", "max_iters", int),
    "pga_tol": ("pga", "stop_tol", float),
}


def _parse_kv_lines(path: str) -> list[tuple[str, str]]:
    pairs = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if line.startswith("[") and line.endswith("]"):
                    pairs.append((line, ""))
                    continue
                if "=" not in line:
                    raise InputError(f"{path}:{lineno}: expected key=value, got {line!r}")
                key, value = line.split("=", 1)
                pairs.append((key.strip(), value.strip()))
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    return pairs


def load_config(path: str | None, overrides: dict | None = None) -> SolverConfig:
    """Build a SolverConfig from defaults, an optional key=value file, and flag overrides."""
    cfg = SolverConfig()
    if path is not None:
        admm, pga = cfg.admm, cfg.pga
        updates = {}
        for key, value in _parse_kv_lines(path):
            if key.startswith("["):
                raise InputError(f"{path}: unexpected section {key!r} in config file")
            if key not in _CONFIG_KEYS:
                raise InputError(f"{path}: unknown config key {key!r}")
            target, fname, typ = _CONFIG_KEYS[key]
            try:
                parsed = typ(value)
            except ValueError as exc:
                raise InputError(f"{path}: bad value for {key}: {value!r}") from exc
            if key == "transform":
                try:
                    parsed = SparsifyingTransform(parsed)
                except ValueError as exc:
                    raise InputError(str(exc)) from exc
            if target == "admm":
                admm = replace(admm, **{fname: parsed})
            elif target == "pga":
                pga = replace(pga, **{fname: parsed})
            else:
                updates[fname] = parsed
        try:
            cfg = replace(cfg, admm=admm, pga=pga, **updates)
        except ValueError as exc:
            raise InputError(f"{path}: {exc}") from exc
    if overrides:
        try:
            cfg = replace(cfg, **overrides)
        except ValueError as exc:
            raise InputError(str(exc)) from exc
    return cfg


def write_kernel_text(kernel: np.ndarray, path: str) -> None:
    """Plain-text kernel: first line the size d, then d rows of d values."""
    d = kernel.shape[0]
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"{d}\n")
        for row in kernel:
            fh.write(" ".join(f"{v:.12e}" for v in row) + "\n")


def read_kernel_text(path: str) -> np.ndarray:
    with open(path, "r", encoding="ascii") as fh:
        tokens = fh.read().split()
    if not tokens:
        raise InputError(f"{path}: empty kernel file")
    d = int(tokens[0])
    if len(tokens) != 1 + d * d:
        raise InputError(f"{path}: expected {d * d} values, found {len(tokens) - 1}")
    return np.array([float(t) for t in tokens[1:]]).reshape(d, d)


def _save_kernel_image(kernel: np.ndarray, path: str) -> None:
    peak = kernel.max()
    image_io.save_image(kernel / peak if peak > 0 else kernel, path)


def _load_image_checked(path: str) -> np.ndarray:
    try:
        return image_io.load_image(path)
    except image_io.ImageFormatError as exc:
        raise InputError(str(exc)) from exc


def _build_layers(args, shape: tuple[int, int]) -> LayerSet:
    sources = [s for s in ("defocus_map", "labels", "mask") if getattr(args, s)]
    if len(sources) != 1:
        raise InputError(
            "exactly one mask source is required: "
            "--defocus-map with --thresholds, --labels, or --mask"
        )
    try:
        if args.defocus_map:
            if not args.thresholds:
                raise InputError("--defocus-map requires --thresholds")
            dmap = _load_image_checked(args.defocus_map)
            if dmap.ndim != 2:
                raise InputError("defocus map must be single-channel")
            try:
                thresholds = [float(t) for t in args.thresholds.split(",") if t]
            except ValueError as exc:
                raise InputError(f"bad --thresholds {args.thresholds!r}") from exc
            layers = layers_from_defocus_map(dmap, thresholds)
        elif args.labels:
            try:
                labels = image_io.load_labels(args.labels)
            except image_io.ImageFormatError as exc:
                raise InputError(str(exc)) from exc
            layers = LayerSet.from_labels(labels)
        else:
            masks = [image_io.load_mask(p) for p in args.mask]
            union = np.zeros(shape)
            for m in masks:
                union += m
            if union.max() > 1:
                raise InputError("--mask regions overlap")
            in_focus = 1.0 - union
            layers = LayerSet(masks=[in_focus] + masks)
    except (ValueError, image_io.ImageFormatError) as exc:
        raise InputError(str(exc)) from exc
    if layers.shape != shape:
        raise InputError(f"layer masks {layers.shape} do not match image {shape}")
    return layers


def _output_name(stem: str, img: np.ndarray, like: str) -> str:
    ext = os.path.splitext(like)[1].lower()
    if ext == ".png":
        return stem + ".png"
    return stem + (".ppm" if img.ndim == 3 else ".pgm")


def _cmd_deblur(args) -> int:
    f = _load_image_checked(args.input)
    layers = _build_layers(args, f.shape[:2])
    overrides = {"use_c_term": not args.no_c_term}
    config = load_config(args.config, overrides)
    os.makedirs(args.out, exist_ok=True)

    result, outcomes = deblur_all(f, layers, config, threads=args.threads)
    out_path = os.path.join(args.out, _output_name("all_in_focus", result, args.input))
    image_io.save_image(np.clip(result, 0.0, 1.0), out_path)
    log.info("wrote %s", out_path)

    for outcome in outcomes:
        status = "ok" if outcome.ok else f"failed: {outcome.error}"
        print(f"layer {outcome.index}\t{status}")
        if outcome.solution is None:
            continue
        if args.dump_kernels:
            stem = os.path.join(args.out, f"layer_{outcome.index:02d}_kernel")
            write_kernel_text(outcome.solution.kernel, stem + ".txt")
            _save_kernel_image(outcome.solution.kernel, stem + ".pgm")
        if args.dump_residual:
            stem = os.path.join(args.out, f"layer_{outcome.index:02d}_residual")
            image_io.save_image(np.clip(np.abs(outcome.solution.c), 0.0, 1.0), stem + ".pgm")

    solved = [o for o in outcomes if o.index > 0]
    if solved and all(not o.ok for o in solved):
        return 2
    return 0


_KERNEL_FAMILIES = {
    "disk": ("radius",),
    "gaussian": ("sigma",),
    "pillbox": ("diameter",),
    "gaussian-pupil": ("diameter", "sigma"),
}


def _make_scene_kernel(layer_idx: int, family: str, params: dict) -> np.ndarray:
    size = int(params.pop("size", 31))
    if size % 2 == 0 or size < 1:
        raise InputError(f"layer {layer_idx}: kernel size must be odd, got {size}")
    if family not in _KERNEL_FAMILIES:
        raise InputError(f"layer {layer_idx}: unknown kernel family {family!r}")
    needed = _KERNEL_FAMILIES[family]
    missing = [p for p in needed if p not in params]
    extra = [p for p in params if p not in needed]
    if missing or extra:
        raise InputError(
            f"layer {layer_idx}: kernel {family} takes {needed}, "
            f"missing {missing or 'none'}, unexpected {extra or 'none'}"
        )
    try:
        if family == "disk":
            radius = float(params["radius"])
            if 2 * radius > size:
                raise InputError(
                    f"layer {layer_idx}: disk radius {radius} exceeds the "
                    f"{size}x{size} kernel grid"
                )
            return disk_kernel(radius, size)
        if family == "gaussian":
            return gaussian_kernel(float(params["sigma"]), size)
        if family == "pillbox":
            return pillbox_kernel(int(params["diameter"]), size)
        return gaussian_pupil_kernel(float(params["diameter"]), float(params["sigma"]), size)
    except ValueError as exc:
        raise InputError(f"layer {layer_idx}: {exc}") from exc


def _parse_scene(path: str, shape: tuple[int, int]) -> tuple[list[SceneLayer], float]:
    noise_sigma = 0.0
    layers: list[SceneLayer] = []
    block: dict | None = None
    blocks: list[dict] = []
    for key, value in _parse_kv_lines(path):
        if key == "[layer]":
            block = {}
            blocks.append(block)
            continue
        if key.startswith("["):
            raise InputError(f"{path}: unknown section {key!r}")
        if block is None:
            if key != "noise_sigma":
                raise InputError(f"{path}: unknown global key {key!r}")
            noise_sigma = float(value)
            continue
        block[key] = value

    for idx, blk in enumerate(blocks, start=1):
        if "kernel" not in blk:
            raise InputError(f"{path}: layer {idx} has no kernel")
        fields = blk["kernel"].split()
        family = fields[0]
        params = {}
        for fld in fields[1:]:
            if "=" not in fld:
                raise InputError(f"{path}: layer {idx}: bad kernel parameter {fld!r}")
            pkey, pval = fld.split("=", 1)
            params[pkey] = pval
        kernel = _make_scene_kernel(idx, family, params)

        if ("mask" in blk) == ("rect" in blk):
            raise InputError(f"{path}: layer {idx} needs exactly one of mask= or rect=")
        if "mask" in blk:
            mask = image_io.load_mask(blk["mask"])
            if mask.shape != shape:
                raise InputError(f"{path}: layer {idx} mask does not match the image")
        else:
            try:
                x, y, w, h = (int(v) for v in blk["rect"].split(","))
            except ValueError as exc:
                raise InputError(f"{path}: layer {idx}: bad rect {blk['rect']!r}") from exc
            if w < 1 or h < 1 or x < 0 or y < 0 or y + h > shape[0] or x + w > shape[1]:
                raise InputError(f"{path}: layer {idx}: rect outside the image")
            mask = np.zeros(shape)
            mask[y : y + h, x : x + w] = 1.0
        layers.append(SceneLayer(mask=mask, kernel=kernel))
    return layers, noise_sigma


def _cmd_synth(args) -> int:
    truth = _load_image_checked(args.truth)
    scene_layers, noise_sigma = _parse_scene(args.scene, truth.shape[:2])
    spec = SceneSpec(truth=truth, layers=scene_layers, noise_sigma=noise_sigma)
    try:
        blurred, _, layer_set, kernels = synthesize(spec, args.seed)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    os.makedirs(args.out, exist_ok=True)
    blurred_path = os.path.join(args.out, _output_name("blurred", blurred, args.truth))
    image_io.save_image(blurred, blurred_path)
    labels = layer_set.to_labels().astype(np.float64) / 255.0
    image_io.save_image(labels, os.path.join(args.out, "labels.pgm"))
    for i, kernel in enumerate(kernels):
        if i == 0:
            continue
        stem = os.path.join(args.out, f"layer_{i:02d}_kernel")
        write_kernel_text(kernel, stem + ".txt")
        _save_kernel_image(kernel, stem + ".pgm")
    log.info("wrote %s and %d kernel file(s)", blurred_path, len(kernels) - 1)
    return 0


def _cmd_eval(args) -> int:
    result = _load_image_checked(args.result)
    truth = _load_image_checked(args.truth)
    layers = None
    if args.labels:
        try:
            layers = LayerSet.from_labels(image_io.load_labels(args.labels))
        except (ValueError, image_io.ImageFormatError) as exc:
            raise InputError(str(exc)) from exc
    try:
        rows = evaluate(result, truth, layers)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    for row in rows:
        value = row["psnr_db"]
        text = "+inf" if value == float("inf") else f"{value:.4f}"
        print(f"{row['layer']}\t{row['pixels']}\t{text}")
    return 0


def _cmd_kernel(args) -> int:
    from .layer_solver import LayerProblem, solve_layer

    f = _load_image_checked(args.input)
    lum = image_io.to_luminance(f)
    try:
        mask = image_io.load_mask(args.mask)
    except image_io.ImageFormatError as exc:
        raise InputError(str(exc)) from exc
    overrides = {
        "use_symmetry": not args.no_symmetry,
        "use_lowrank": not args.no_lowrank,
    }
    config = load_config(args.config, overrides)
    try:
        problem = LayerProblem(f=lum, alpha=mask, config=config)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    try:
        solution = solve_layer(problem)
    except Exception as exc:
        print(f"kernel estimation failed: {exc}", file=sys.stderr)
        return 2
    os.makedirs(args.out, exist_ok=True)
    stem = os.path.join(args.out, "kernel")
    write_kernel_text(solution.kernel, stem + ".txt")
    _save_kernel_image(solution.kernel, stem + ".pgm")
    rank = effective_rank(solution.kernel, config.rank_threshold_ratio)
    print(f"kernel\t{config.kernel_size}\teffective_rank\t{rank}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="defocus-deblur", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("deblur", help="recover an all-in-focus image")
    p.add_argument("--input", required=True)
    p.add_argument("--defocus-map", dest="defocus_map")
    p.add_argument("--thresholds", help="comma-separated increasing cut points")
    p.add_argument("--labels", help="integer label map (0 = in focus)")
    p.add_argument("--mask", action="append", default=[],
                   help="out-of-focus layer mask; repeatable")
    p.add_argument("--config")
    p.add_argument("--out", default=".")
    p.add_argument("--dump-kernels", action="store_true")
    p.add_argument("--dump-residual", action="store_true")
    p.add_argument("--no-c-term", action="store_true",
                   help="disable the sparse residual absorbing segmentation errors")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=_cmd_deblur)

    p = sub.add_parser("synth", help="render a synthetic defocus scene")
    p.add_argument("--truth", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", default=".")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("eval", help="PSNR report against a ground truth")
    p.add_argument("--result", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--labels")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("kernel", help="estimate one layer's kernel")
    p.add_argument("--input", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--no-symmetry", action="store_true")
    p.add_argument("--no-lowrank", action="store_true")
    p.add_argument("--config")
    p.add_argument("--out", default=".")
    p.set_defaults(func=_cmd_kernel)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=logging.DEBUG if args.verbose > 1 else
            logging.INFO if args.verbose else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s",
        )
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
