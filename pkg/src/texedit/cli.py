"""Command-line front end.

Exit codes: 0 success, 2 invalid input or configuration, 3 runtime failure.
Runs locally by default; ``--server URL`` sends edit and reconstruct jobs to a
running ``texedit serve`` instead.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import config as cfg
from . import io, runner
from .errors import ConfigurationError, TexEditError, error_field, is_validation

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3

logger = logging.getLogger("texedit")


FLAGLESS = {"schema_version", "query_layers", "query_fraction", "query_steps", "residual_layers", "residual_steps",
            "inject_queries", "inject_residuals", "unconditional_prompt", "mask_resolution", "injection"}


def _flag(field: str | None) -> str:
    if not field:
        return ""
    if field in FLAGLESS:
        return f"config key {field}"
    return f"--{field.replace('_', '-')}"


class _IOFailure(Exception):
    pass


def _settings_args(p: argparse.ArgumentParser, edit: bool) -> None:
    # every default is None so unset flags never shadow config-file values
    p.add_argument("--config", help="YAML config file or run manifest")
    p.add_argument("--image")
    p.add_argument("--source-prompt")
    p.add_argument("--out")
    p.add_argument("--model", help="backbone id or diffusers directory (default sd-v1.4)")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--inversion-guidance", type=float)
    p.add_argument("--device")
    p.add_argument("--server", help="URL of a texedit service to run the job on")
    if edit:
        p.add_argument("--texture", help="single texture word; the edit branch's whole prompt")
        p.add_argument("--object-word", help="word in the source prompt naming the object to retexture")
        p.add_argument("--guidance", type=float)
        p.add_argument("--mask-threshold", type=float)
        p.add_argument("--mask-convention", choices=("edited-inside", "verbatim"))
        p.add_argument("--mask-in", help="binary PNG overriding the extracted mask")
        p.add_argument("--mask-out", help="write the final edit mask here (1-bit PNG)")
        p.add_argument("--no-localization", dest="localization", action="store_const", const=False)
    else:
        p.add_argument("--object-word")


def _collect(args: argparse.Namespace, keys) -> dict:
    out = {}
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            out[key] = value
    return out


def _require(settings: cfg.Settings, keys) -> None:
    for key in keys:
        if getattr(settings, key) in (None, ""):
            raise ConfigurationError(f"required (flag or config key {key})", field=key)


def _absolute(settings: cfg.Settings) -> cfg.Settings:
    paths = {k: str(Path(v).resolve()) for k in ("image", "out", "mask_in", "mask_out")
             if (v := getattr(settings, k)) is not None}
    return settings.model_copy(update=paths)


def _resolve(args, keys) -> cfg.Settings:
    return _absolute(cfg.resolve(_collect(args, keys), args.config))


def _write_outputs(writes) -> list:
    """Run output writers; filesystem failures are runtime errors."""
    try:
        return [fn() for fn in writes]
    except OSError as exc:
        raise _IOFailure(f"io failed writing outputs: {exc}") from exc


EDIT_KEYS = ("image", "source_prompt", "texture", "object_word", "out", "model", "seed", "steps", "guidance",
             "inversion_guidance", "mask_threshold", "mask_convention", "mask_in", "mask_out", "localization",
             "device")


def cmd_edit(args) -> int:
    settings = _resolve(args, EDIT_KEYS)
    _require(settings, ("image", "source_prompt", "texture", "object_word", "out"))
    image = io.read_image(settings.image)
    mask = io.read_mask(settings.mask_in) if settings.mask_in else None
    if args.server:
        from .client import remote_edit
        from .service.schemas import decode_png
        resp = remote_edit(args.server, settings, image, mask)
        edited = decode_png(resp.edited, "edited")
        out_mask = decode_png(resp.mask, "mask", mask=True) if resp.mask else None
        timing = resp.timing
    else:
        result = runner.run_edit(settings, image, runner.BackboneCache(), mask=mask)
        edited, out_mask, timing = result.edited, result.mask, result.timing
    outputs = {"edited": settings.out}
    writes = [lambda: io.write_image(settings.out, edited)]
    if settings.mask_out and out_mask is not None:
        outputs["mask"] = settings.mask_out
        writes.append(lambda: io.write_mask(settings.mask_out, out_mask))
    manifest = cfg.build_manifest("edit", settings, outputs, timing)
    writes.append(lambda: cfg.write_manifest(settings.out, manifest))
    _write_outputs(writes)
    print(f"wrote {settings.out}")
    return EXIT_OK


RECON_KEYS = ("image", "source_prompt", "object_word", "out", "model", "seed", "steps", "inversion_guidance", "device")


def cmd_reconstruct(args) -> int:
    settings = _resolve(args, RECON_KEYS)
    _require(settings, ("image", "source_prompt", "out"))
    image = io.read_image(settings.image)
    if args.server:
        from .client import remote_reconstruct
        from .service.schemas import decode_png
        resp = remote_reconstruct(args.server, settings, image)
        recon, psnr, timing = decode_png(resp.image, "image"), resp.psnr, resp.timing
    else:
        result = runner.run_reconstruct(settings, image, runner.BackboneCache())
        recon, psnr, timing = result.image, result.psnr, result.timing
    manifest = cfg.build_manifest("reconstruct", settings, {"reconstruction": settings.out}, timing, {"psnr": psnr})
    _write_outputs([lambda: io.write_image(settings.out, recon), lambda: cfg.write_manifest(settings.out, manifest)])
    print(f"wrote {settings.out}")
    print(f"PSNR vs input: {psnr:.2f} dB")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    entries = runner.scan_eval_dir(args.dir)
    report = runner.evaluate_entries(entries, runner.make_evaluator(args.networks, args.cache_dir), args.workers)
    out_dir = Path(args.out or args.dir)
    [(text_path, json_path)] = _write_outputs([lambda: report.write(out_dir)])
    print(report.to_text(), end="")
    print(f"wrote {text_path} and {json_path}")
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app
    uvicorn.run(create_app(), host=args.host, port=args.port)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="texedit", description="Texture transfer onto objects in images.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("edit", help="transfer a texture onto an object")
    _settings_args(p, edit=True)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("reconstruct", help="invert and re-denoise without editing; prints PSNR vs input")
    _settings_args(p, edit=False)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("evaluate", help="score a directory of edits")
    p.add_argument("--dir", required=True, help="directory of <name>/{source.png,edited.png,mask.png,texture.txt}")
    p.add_argument("--out", help="report directory (default: --dir)")
    p.add_argument("--networks", choices=("pretrained", "test-doubles", "none"), default="pretrained",
                   help="networks behind structure distance, LPIPS and CLIP similarity")
    p.add_argument("--cache-dir")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except TexEditError as exc:
        if is_validation(exc):
            flag = _flag(error_field(exc))
            print(f"texedit: error: {flag + ': ' if flag else ''}{exc}", file=sys.stderr)
            return EXIT_INVALID
        print(f"texedit: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except _IOFailure as exc:
        print(f"texedit: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
