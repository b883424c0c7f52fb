"""Command-line front end.

Five subcommands: train-adapter, remove, eval, embed, serve. Exit codes
are 0 on success, 1 for usage problems, 2 for runtime failures. With
--json, errors go to stderr as one JSON object. Every command starts by
echoing the resolved config snapshot and the seed in force.
"""

from __future__ import annotations

import argparse
import json
import sys
from itertools import islice
from pathlib import Path

import numpy as np

from .adapter import AdapterTrainingConfig, save_adapter, train_projection_adapter
from .backends import BackendKind, create_backend
from .benchmark import run_benchmark
from .coco import IngestStats, ingest_coco, object_class_names
from .config import ToolkitConfig, build_model_stack
from .embedding import save_embedding
from .encoders import decode_image_bytes, decode_mask_bytes, encode_image_png
from .errors import ClipawayError
from .pipeline import RemovalRequest, compute_final_embedding, dilate_mask, remove_object

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # usage problems exit 1, not argparse's default 2
    def error(self, message):
        raise _UsageError(message)


def _emit_error(kind: str, detail: str, json_mode: bool) -> None:
    if json_mode:
        print(json.dumps({"error": kind, "detail": detail}), file=sys.stderr)
    else:
        print(f"error: {detail}", file=sys.stderr)


def _load_config(args) -> ToolkitConfig:
    if args.config:
        config = ToolkitConfig.load(args.config)
    else:
        config = ToolkitConfig()
        config.validate()
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    return config


def _echo(config: ToolkitConfig) -> None:
    print(f"resolved config: {json.dumps(config.snapshot(), sort_keys=True)}")
    print(f"seed: {config.seed}")


def _parse_backend(name: str) -> BackendKind:
    try:
        return BackendKind.parse(name)
    except ClipawayError as exc:
        raise _UsageError(str(exc)) from None


def _read_image(path: str) -> np.ndarray:
    return decode_image_bytes(Path(path).read_bytes())


def _read_mask(path: str) -> np.ndarray:
    return decode_mask_bytes(Path(path).read_bytes())


def _provenance(config: ToolkitConfig) -> dict:
    return config.snapshot()


# ---------------------------------------------------------------- commands


def cmd_train_adapter(args, config: ToolkitConfig) -> int:
    image_dir = Path(args.images)
    if not image_dir.is_dir():
        raise _UsageError(f"--images is not a directory: {image_dir}")
    paths = sorted(
        p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES
    )
    if not paths:
        raise ClipawayError(f"no training images under {image_dir}")
    images = [decode_image_bytes(p.read_bytes()) for p in paths]

    cfg = AdapterTrainingConfig(
        learning_rate=args.lr,
        weight_decay=args.weight_decay,
        batch_size=args.batch_size,
        total_steps=args.steps,
        seed=config.seed,
        checkpoint_interval=args.checkpoint_interval,
        checkpoint_path=args.checkpoint or None,
    )
    print(f"training on {len(images)} images for {cfg.total_steps} steps")
    stack = build_model_stack(config)
    result = train_projection_adapter(
        images, stack.region_encoder, stack.plain_encoder, cfg
    )
    save_adapter(result.adapter, args.out)
    print(f"wrote adapter checkpoint: {args.out}")
    if args.loss_csv:
        result.save_loss_csv(args.loss_csv)
        print(f"wrote loss history: {args.loss_csv}")
    print(f"final loss: {float(result.losses[-1])!r}")
    return EXIT_OK


def cmd_remove(args, config: ToolkitConfig) -> int:
    image = _read_image(args.image)
    mask = _read_mask(args.mask)
    kind = _parse_backend(args.backend)
    p = config.pipeline
    try:
        request = RemovalRequest(
            image=image,
            mask=mask,
            dilation_kernel=args.kernel if args.kernel is not None else p.dilation_kernel,
            backend=kind,
            steps=args.steps if args.steps is not None else p.steps,
            guidance_scale=(
                args.guidance if args.guidance is not None else p.guidance_scale
            ),
            ip_adapter_scale=(
                args.ip_scale if args.ip_scale is not None else p.ip_adapter_scale
            ),
            seed=config.seed,
            composite_unmasked=(
                False if args.no_composite else p.composite_unmasked
            ),
        )
    except (ValueError, ClipawayError) as exc:
        raise _UsageError(str(exc)) from None

    stack = build_model_stack(config)
    backend = create_backend(kind, mock_mode=config.mock_mode)
    result = remove_object(
        request, stack.region_encoder, stack.adapter, backend, stack.token_projection
    )

    provenance = _provenance(config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(
        encode_image_png(
            result.output,
            text_metadata={"clipaway": json.dumps(provenance, sort_keys=True)},
        )
    )
    diagnostics_path = (
        Path(args.diagnostics) if args.diagnostics else out.with_suffix(".diagnostics.json")
    )
    payload = dict(result.diagnostics)
    payload["provenance"] = provenance
    diagnostics_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    print(f"wrote result: {out}")
    print(f"wrote diagnostics: {diagnostics_path}")
    print(f"cos(e_final, e_fg): {result.diagnostics['cos_final_fg']!r}")
    return EXIT_OK


def cmd_eval(args, config: ToolkitConfig) -> int:
    limit = args.limit if args.limit is not None else config.eval.limit
    out_dir = args.out or config.eval.output_dir
    annotation = args.annotations or config.eval.annotation_file
    image_dir = args.images or config.eval.image_dir
    backend_names = (
        args.backends.split(",") if args.backends else list(config.eval.backends)
    )
    kinds = [_parse_backend(name) for name in backend_names]
    if args.no_clipaway:
        with_clipaway = False
    elif args.with_clipaway:
        with_clipaway = True
    else:
        with_clipaway = config.eval.with_clipaway

    if limit == 0:
        instances: list = []
        class_names: list = []
        stats_dict = None
    else:
        if not annotation or not image_dir:
            raise _UsageError(
                "eval needs --annotations and --images (or eval.* config keys)"
            )
        stats = IngestStats()
        stream = ingest_coco(annotation, image_dir, stats=stats)
        if limit is not None:
            stream = islice(stream, limit)
        instances = list(stream)
        class_names = object_class_names(annotation)
        stats_dict = stats.to_dict()

    stack = build_model_stack(config)

    def backend_factory(kind: BackendKind):
        return create_backend(kind, mock_mode=config.mock_mode)

    reports = run_benchmark(
        instances,
        class_names,
        stack,
        out_dir,
        backends=kinds,
        with_clipaway=with_clipaway,
        limit=limit,
        dilation_kernel=config.pipeline.dilation_kernel,
        steps=config.pipeline.steps,
        guidance_scale=config.pipeline.guidance_scale,
        ip_adapter_scale=config.pipeline.ip_adapter_scale,
        base_seed=config.seed,
        cmmd_sigma=config.eval.cmmd_sigma,
        backend_factory=backend_factory,
        ingest_stats=stats_dict,
    )
    for label in sorted(reports):
        report = reports[label]
        acc = report.clip_acc.get(1)
        print(
            f"{label}: n={report.n_instances} skipped={report.n_skipped}"
            f" fid={report.fid} cmmd={report.cmmd}"
            f" clip_distance={report.clip_distance_mean} acc@1={acc}"
        )
    print(f"wrote reports under: {out_dir}")
    return EXIT_OK


def cmd_embed(args, config: ToolkitConfig) -> int:
    image = _read_image(args.image)
    mask = _read_mask(args.mask)
    if mask.shape != image.shape[:2]:
        raise _UsageError(
            f"mask {mask.shape} does not match image {image.shape[:2]}"
        )
    kernel = args.kernel if args.kernel is not None else config.pipeline.dilation_kernel
    try:
        dilated = dilate_mask(mask, kernel)
    except ValueError as exc:
        raise _UsageError(str(exc)) from None

    stack = build_model_stack(config)
    e_final, diagnostics = compute_final_embedding(
        image, dilated, stack.region_encoder, stack.adapter
    )
    e_fg = diagnostics.pop("_e_fg")
    e_bg = diagnostics.pop("_e_bg")

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, emb in (("e_fg", e_fg), ("e_bg", e_bg), ("e_final", e_final)):
        save_embedding(emb, out_dir / f"{name}.emb")
    summary = dict(diagnostics)
    summary["dilation_kernel"] = kernel
    summary["provenance"] = _provenance(config)
    (out_dir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n"
    )
    print(f"wrote embeddings under: {out_dir}")
    print(f"cos(e_final, e_fg): {diagnostics['cos_final_fg']!r}")
    return EXIT_OK


def cmd_serve(args, config: ToolkitConfig) -> int:
    import uvicorn

    from .service import create_app

    host = args.host or config.service.host
    port = args.port if args.port is not None else config.service.port
    app = create_app(config)
    print(f"serving on http://{host}:{port}")
    uvicorn.run(app, host=host, port=port, log_level="info")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="TOML config path")
    sub.add_argument("--seed", type=int, help="override the config seed")
    sub.add_argument(
        "--json", action="store_true", help="machine-readable errors on stderr"
    )


def build_parser() -> _Parser:
    parser = _Parser(prog="clipaway", description=__doc__)
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {_version()}"
    )
    subs = parser.add_subparsers(dest="command", required=True)

    train = subs.add_parser("train-adapter", help="fit the projection adapter")
    train.add_argument("--images", required=True, help="directory of training images")
    train.add_argument("--out", required=True, help="checkpoint output path (.npz)")
    train.add_argument("--steps", type=int, default=AdapterTrainingConfig.total_steps)
    train.add_argument("--lr", type=float, default=AdapterTrainingConfig.learning_rate)
    train.add_argument(
        "--weight-decay", type=float, default=AdapterTrainingConfig.weight_decay
    )
    train.add_argument(
        "--batch-size", type=int, default=AdapterTrainingConfig.batch_size
    )
    train.add_argument("--loss-csv", help="write per-step losses here")
    train.add_argument("--checkpoint-interval", type=int, default=0)
    train.add_argument("--checkpoint", help="periodic checkpoint path")
    _add_common(train)
    train.set_defaults(func=cmd_train_adapter)

    remove = subs.add_parser("remove", help="remove the masked object from an image")
    remove.add_argument("--image", required=True)
    remove.add_argument("--mask", required=True)
    remove.add_argument("--out", required=True, help="output PNG path")
    remove.add_argument("--diagnostics", help="diagnostics JSON path")
    remove.add_argument("--backend", default="sd_inpaint")
    remove.add_argument("--kernel", type=int, help="mask dilation kernel (odd)")
    remove.add_argument("--steps", type=int)
    remove.add_argument("--guidance", type=float)
    remove.add_argument("--ip-scale", type=float)
    remove.add_argument("--no-composite", action="store_true")
    _add_common(remove)
    remove.set_defaults(func=cmd_remove)

    ev = subs.add_parser("eval", help="run the removal benchmark")
    ev.add_argument("--dataset", choices=["coco"], default="coco")
    ev.add_argument("--annotations", help="instance annotation JSON")
    ev.add_argument("--images", help="image directory")
    ev.add_argument("--out", help="output directory")
    ev.add_argument("--limit", type=int, help="evaluate at most N instances")
    ev.add_argument("--backends", help="comma-separated backend names")
    ev.add_argument("--with-clipaway", action="store_true", default=False)
    ev.add_argument("--no-clipaway", action="store_true", default=False)
    _add_common(ev)
    ev.set_defaults(func=cmd_eval)

    embed = subs.add_parser("embed", help="dump e_fg, e_bg, e_final for inspection")
    embed.add_argument("--image", required=True)
    embed.add_argument("--mask", required=True)
    embed.add_argument("--out-dir", required=True)
    embed.add_argument("--kernel", type=int)
    _add_common(embed)
    embed.set_defaults(func=cmd_embed)

    serve = subs.add_parser("serve", help="start the HTTP removal service")
    serve.add_argument("--host")
    serve.add_argument("--port", type=int)
    _add_common(serve)
    serve.set_defaults(func=cmd_serve)

    return parser


def _version() -> str:
    from . import __version__

    return __version__


def _wants_json(argv) -> bool:
    return "--json" in (sys.argv[1:] if argv is None else list(argv))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        _emit_error("usage", str(exc), _wants_json(argv))
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)

    try:
        config = _load_config(args)
        _echo(config)
        return args.func(args, config)
    except _UsageError as exc:
        _emit_error("usage", str(exc), args.json)
        return EXIT_USAGE
    except (ClipawayError, OSError, ValueError) as exc:
        _emit_error(type(exc).__name__, str(exc), args.json)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
