"""Command line front door for transfers, sweeps, inversion, eval and serving.

Machine-readable output goes to stdout as a single line per command prefixed
with "RESULT "; progress and errors go to stderr. Exit codes: 0 success, 2
invalid arguments or inputs, 3 backend could not be loaded, 4 a run started
and then aborted.

Settings resolve in precedence order: explicit flags, then a --config JSON
file, then built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .core import (
    CONFIG_DEFAULTS,
    BinaryMask,
    ImageRGB,
    PromptSet,
    TransferConfig,
    ValidationError,
    load_config_file,
    make_config,
)
from .denoiser import BackendLoadError, load_pretrained_backend, make_toy_backend
from .pipeline import (
    CancelledRun,
    NonFiniteLatentError,
    TransferRequest,
    lambda_sweep,
    material_transfer,
    write_run_dir,
)
from .sampler import InversionResult, NoiseSchedule, TrajectoryCache, ddim_invert

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_BACKEND = 3
EXIT_ABORTED = 4

_CONFIG_FLAGS = {
    "w": float,
    "lam": float,
    "v_self": float,
    "v_feat": float,
    "tau_g": int,
    "tau_m": int,
    "r_lower": float,
    "r_upper": float,
    "T": int,
    "seed": int,
}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("sampling settings (override --config and defaults)")
    for name, cast in _CONFIG_FLAGS.items():
        flag = "--steps" if name == "T" else "--" + name.replace("_", "-")
        group.add_argument(flag, dest=f"cfg_{name}", type=cast, default=None, metavar=name.upper())
    group.add_argument("--config", default=None, metavar="FILE", help="JSON file with settings")


def _add_backend_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("backend")
    group.add_argument("--backend", choices=("toy", "pretrained"), default="toy")
    group.add_argument("--backend-seed", type=int, default=0, help="toy backend weights seed")
    group.add_argument("--weights", default=None, help="weights directory (or set MATFUSE_WEIGHTS_DIR)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="matfuse", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    transfer = sub.add_parser("transfer", help="run one material transfer")
    transfer.add_argument("--init", required=True, help="object image")
    transfer.add_argument("--material", required=True, help="material exemplar image")
    transfer.add_argument("--mask", required=True, help="binary object mask")
    transfer.add_argument("--y-src", required=True, help="source prompt")
    transfer.add_argument("--y-trg", required=True, help="target prompt")
    transfer.add_argument("--out", required=True, help="output directory")
    transfer.add_argument("--force", action="store_true", help="overwrite existing output")
    transfer.add_argument("--log-energies", action="store_true", help="record energies on every step")
    _add_config_flags(transfer)
    _add_backend_flags(transfer)

    sweep = sub.add_parser("sweep", help="run the same transfer at several transfer forces")
    sweep.add_argument("--init", required=True)
    sweep.add_argument("--material", required=True)
    sweep.add_argument("--mask", required=True)
    sweep.add_argument("--y-src", required=True)
    sweep.add_argument("--y-trg", required=True)
    sweep.add_argument("--out", required=True)
    sweep.add_argument("--lams", default="0.5,0.8,1.1,1.5", help="comma-separated transfer forces")
    sweep.add_argument("--force", action="store_true")
    _add_config_flags(sweep)
    _add_backend_flags(sweep)

    invert = sub.add_parser("invert", help="invert an image and save the trajectory")
    invert.add_argument("--init", required=True)
    invert.add_argument("--y-src", required=True)
    invert.add_argument("--out", required=True, help="output .pt file")
    invert.add_argument("--force", action="store_true")
    _add_config_flags(invert)
    _add_backend_flags(invert)

    evaluate = sub.add_parser("evaluate", help="score transfers over a dataset manifest")
    evaluate.add_argument("--manifest", required=True, help="JSONL manifest")
    evaluate.add_argument("--out", required=True)
    evaluate.add_argument("--crop-sizes", default="64,128", help="comma-separated crop sizes")
    evaluate.add_argument("--force", action="store_true")
    _add_config_flags(evaluate)
    _add_backend_flags(evaluate)

    serve = sub.add_parser("serve", help="start the transfer job service")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    serve.add_argument("--data-dir", default=None, help="job storage directory")
    serve.add_argument("--workers", type=int, default=None, help="concurrent sampling workers")
    _add_backend_flags(serve)

    return parser


def resolve_config(args: argparse.Namespace) -> TransferConfig:
    values = dict(CONFIG_DEFAULTS)
    if args.config:
        values.update(load_config_file(args.config))
    for name in _CONFIG_FLAGS:
        given = getattr(args, f"cfg_{name}")
        if given is not None:
            values[name] = given
    return make_config(values)


def build_backend(args: argparse.Namespace, image_size: tuple[int, int] | None = None):
    if args.backend == "toy":
        return make_toy_backend(seed=args.backend_seed, image_size=image_size or (64, 64))
    return load_pretrained_backend(args.weights)


def _load_inputs(args: argparse.Namespace):
    init = ImageRGB.from_file(args.init)
    material = ImageRGB.from_file(args.material)
    mask = BinaryMask.from_file(args.mask)
    return init, material, mask


def _cached_inversion(backend, image, y_src, config) -> InversionResult | None:
    cache_dir = os.environ.get("MATFUSE_CACHE_DIR")
    if not cache_dir:
        return None
    cache = TrajectoryCache(cache_dir=cache_dir)
    key = TrajectoryCache.key(backend.metadata.fingerprint, image, y_src, config.T)
    trajectory = cache.get(key)
    if trajectory is not None:
        return InversionResult(trajectory=trajectory)
    schedule = NoiseSchedule.scaled_linear(T=config.T, native_steps=backend.metadata.native_steps)
    result = ddim_invert(backend, image, y_src, schedule)
    cache.put(key, result.trajectory)
    return result


def _emit(payload: dict) -> None:
    print("RESULT " + json.dumps(payload, sort_keys=True))


def cmd_transfer(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    init, material, mask = _load_inputs(args)
    backend = build_backend(args, (init.height, init.width))
    request = TransferRequest(
        init_image=init, material_image=material, mask=mask,
        prompts=PromptSet(y_src=args.y_src, y_trg=args.y_trg), config=config,
    )
    inversion = None if args.log_energies else _cached_inversion(backend, init, args.y_src, config)
    result = material_transfer(backend, request, inversion=inversion, log_energies=args.log_energies)
    write_run_dir(result, args.out, force=args.force)
    _emit(
        {
            "command": "transfer",
            "out_dir": args.out,
            "image": os.path.join(args.out, "result.png"),
            "steps": config.T,
            "backend_passes": result.total_backend_passes,
        }
    )
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    try:
        lams = tuple(float(v) for v in args.lams.split(",") if v.strip())
    except ValueError:
        raise ValidationError("lams", f"not a comma-separated list of numbers: {args.lams!r}")
    init, material, mask = _load_inputs(args)
    backend = build_backend(args, (init.height, init.width))
    request = TransferRequest(
        init_image=init, material_image=material, mask=mask,
        prompts=PromptSet(y_src=args.y_src, y_trg=args.y_trg), config=config,
    )
    if os.path.isdir(args.out) and os.listdir(args.out) and not args.force:
        raise FileExistsError(f"output directory {args.out} is not empty (use --force to overwrite)")
    results = lambda_sweep(backend, request, lam_values=lams)
    os.makedirs(args.out, exist_ok=True)
    runs = []
    for lam, result in sorted(results, key=lambda pair: pair[0]):
        sub = os.path.join(args.out, f"lam_{lam:g}")
        write_run_dir(result, sub, force=args.force)
        runs.append({"lam": lam, "dir": sub})
    with open(os.path.join(args.out, "sweep.json"), "w") as fh:
        json.dump({"runs": runs}, fh, indent=2)
        fh.write("\n")
    _emit({"command": "sweep", "out_dir": args.out, "lams": [r["lam"] for r in runs]})
    return EXIT_OK


def cmd_invert(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    init = ImageRGB.from_file(args.init)
    backend = build_backend(args, (init.height, init.width))
    if os.path.exists(args.out) and not args.force:
        raise FileExistsError(f"{args.out} exists (use --force to overwrite)")
    schedule = NoiseSchedule.scaled_linear(T=config.T, native_steps=backend.metadata.native_steps)
    result = ddim_invert(backend, init, args.y_src, schedule)
    import torch

    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    torch.save(
        {"latents": [s.data for s in result.trajectory.latents], "y_src": args.y_src},
        args.out,
    )
    _emit({"command": "invert", "trajectory": args.out, "steps": config.T})
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    from .evaluation import evaluate_dataset, load_manifest

    config = resolve_config(args)
    try:
        sizes = tuple(int(v) for v in args.crop_sizes.split(",") if v.strip())
    except ValueError:
        raise ValidationError("crop_sizes", f"not a comma-separated list of integers: {args.crop_sizes!r}")
    items = load_manifest(args.manifest)
    backend = build_backend(args)
    summary = evaluate_dataset(backend, items, config, args.out, crop_sizes=sizes, force=args.force)
    _emit({"command": "evaluate", "out_dir": args.out, "summary": summary})
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(
        backend_kind=args.backend,
        backend_seed=args.backend_seed,
        weights_dir=args.weights,
        data_dir=args.data_dir,
        workers=args.workers,
    )
    _emit({"command": "serve", "url": f"http://{args.host}:{args.port}"})
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return EXIT_OK


_COMMANDS = {
    "transfer": cmd_transfer,
    "sweep": cmd_sweep,
    "invert": cmd_invert,
    "evaluate": cmd_evaluate,
    "serve": cmd_serve,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except BackendLoadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (ValidationError, FileExistsError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CancelledRun, NonFiniteLatentError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ABORTED


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
