"""Command-line entry point: `tryon run ...`."""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np
from PIL import Image

from .backend import ToyBackend
from .diffusion import GuidanceConfig
from .errors import (
    ArgumentError,
    CapabilityError,
    EmptyRegionError,
    InsufficientCorrespondenceError,
    NumericalDegeneracyError,
    TryOnError,
)
from .pipeline import TryOnJob, run_try_on

EXIT_OK = 0
EXIT_ARGUMENT = 2
EXIT_NO_CORRESPONDENCE = 3
EXIT_CAPABILITY = 4


def load_image(path: str) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0

def load_mask(path: str) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L")) > 127

def save_image(path: str, img: np.ndarray):
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path)


def make_backend(spec: str, image_size: int, steps: int):
    if spec == "toy":
        return ToyBackend(image_size=image_size, num_steps=steps)
    if spec.startswith("ipc:"):
        from .wire import IpcBackend
        return IpcBackend.connect(spec)
    raise ArgumentError(f"unknown backend {spec!r} (expected 'toy' or 'ipc:<endpoint>')")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tryon", description="Zero-shot garment transfer")
    sub = ap.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run the try-on pipeline on one image pair")
    run.add_argument("--person", required=True)
    run.add_argument("--person-mask", required=True)
    run.add_argument("--garment", required=True)
    run.add_argument("--garment-mask", required=True)
    run.add_argument("--prompt", default=None)
    run.add_argument("--out", required=True)
    run.add_argument("--backend", default="toy")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--alpha-mea", type=float, default=15.0)
    run.add_argument("--alpha-text", type=float, default=7.5)
    run.add_argument("--beta", type=float, default=1.5)
    run.add_argument("--stroke-frac", type=float, default=0.35)
    run.add_argument("--steps", type=int, default=50)
    run.add_argument("--t-feat-frac", type=float, default=0.26)
    run.add_argument("--mls-alpha", type=float, default=1.0)
    run.add_argument("--save-intermediates", default=None, metavar="DIR")
    return ap


def cmd_run(args) -> int:
    person = load_image(args.person)
    person_mask = load_mask(args.person_mask)
    garment = load_image(args.garment)
    garment_mask = load_mask(args.garment_mask)

    guidance = GuidanceConfig(alpha_mea=args.alpha_mea, alpha_text=args.alpha_text,
                              stroke_fraction=args.stroke_frac, beta=args.beta)
    job = TryOnJob(person=person, garment=garment, person_mask=person_mask,
                   garment_mask=garment_mask, prompt=args.prompt, guidance=guidance,
                   seed=args.seed, t_feat_frac=args.t_feat_frac, mls_alpha=args.mls_alpha)
    backend = make_backend(args.backend, image_size=min(person.shape[:2]), steps=args.steps)

    intermediates = {} if args.save_intermediates else None
    result = run_try_on(job, backend, intermediates=intermediates)
    save_image(args.out, result)

    if args.save_intermediates:
        write_intermediates(args.save_intermediates, intermediates)
    return EXIT_OK


def write_intermediates(dir_path: str, inter: dict):
    os.makedirs(dir_path, exist_ok=True)
    save_image(os.path.join(dir_path, "warped_garment.png"), inter["warped_garment"])
    save_image(os.path.join(dir_path, "coverage.png"), inter["coverage"].astype(float))
    save_image(os.path.join(dir_path, "fringe.png"), inter["fringe"].astype(float))
    save_image(os.path.join(dir_path, "dilated_fringe.png"), inter["dilated_fringe"].astype(float))
    save_image(os.path.join(dir_path, "registered.png"), inter["registered"])
    with open(os.path.join(dir_path, "metrics.txt"), "w") as fh:
        cps = inter["control_points"]
        fh.write(f"control_points={len(cps.sources)}\n")
        fh.write(f"fringe_px={int(inter['fringe'].sum())}\n")
        px, py, side = inter["crop"]
        fh.write(f"crop_x={px}\ncrop_y={py}\ncrop_side={side}\n")
        for key in sorted(inter["attention"]):
            fh.write(f"{key}={inter['attention'][key]:.6f}\n")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args)
        raise ArgumentError(f"unknown command {args.command!r}")
    except (InsufficientCorrespondenceError, EmptyRegionError, NumericalDegeneracyError) as e:
        print(f"error: registration failed: {e}", file=sys.stderr)
        return EXIT_NO_CORRESPONDENCE
    except CapabilityError as e:
        print(f"error: backend capability: {e}", file=sys.stderr)
        return EXIT_CAPABILITY
    except (ArgumentError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ARGUMENT


if __name__ == "__main__":
    sys.exit(main())
