"""FastAPI application.

Handlers are plain ``def`` so FastAPI runs them in its worker threads; edits
on a shared backbone handle are independent because tap state is per call.
"""
from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import config as cfg
from .. import runner
from ..errors import PipelineError, TexEditError, error_field, is_validation
from . import schemas as S


def create_app(cache: runner.BackboneCache | None = None, evaluator_factory=runner.make_evaluator) -> FastAPI:
    app = FastAPI(title="texedit", version=cfg.versions().get("artifact", "0"))
    app.state.cache = cache or runner.BackboneCache()
    app.state.evaluators = {}

    @app.exception_handler(TexEditError)
    def _texedit_error(request: Request, exc: TexEditError):
        body = S.ErrorResponse(
            kind="validation" if is_validation(exc) else "runtime", message=str(exc), field=error_field(exc),
            module=exc.module if isinstance(exc, PipelineError) else None,
            step=exc.step if isinstance(exc, PipelineError) else None,
        )
        return JSONResponse(status_code=422 if body.kind == "validation" else 500, content=body.model_dump())

    @app.get("/health")
    def health():
        return {"status": "ok", "versions": cfg.versions()}

    @app.get("/inventory", response_model=S.InventoryResponse)
    def inventory(model: str = "sd-v1.4", seed: int = 0):
        handle = app.state.cache.get(model, seed)
        return S.InventoryResponse(
            model=model, latent_size=handle.latent_size,
            layers=[S.LayerModel(index=l.index, place=l.place, resolution=l.resolution, channels=l.channels,
                                 heads=l.heads) for l in handle.layers])

    @app.post("/edit", response_model=S.EditResponse, responses={422: {"model": S.ErrorResponse}})
    def edit(req: S.EditRequest):
        settings = cfg.resolve(req.settings)
        image = S.decode_png(req.image, "image")
        mask = S.decode_png(req.mask, "mask_in", mask=True) if req.mask else None
        result = runner.run_edit(settings, image, app.state.cache, mask=mask)
        return S.EditResponse(
            edited=S.encode_png(result.edited), reconstruction=S.encode_png(result.reconstruction),
            mask=S.encode_png(result.mask) if result.mask is not None else None,
            diagnostics=[S.StepDiagnosticsModel(**vars(d)) for d in result.diagnostics],
            timing=result.timing, settings=settings)

    @app.post("/reconstruct", response_model=S.ReconstructResponse, responses={422: {"model": S.ErrorResponse}})
    def reconstruct(req: S.ReconstructRequest):
        settings = cfg.resolve(req.settings)
        result = runner.run_reconstruct(settings, S.decode_png(req.image, "image"), app.state.cache)
        return S.ReconstructResponse(image=S.encode_png(result.image), psnr=result.psnr, timing=result.timing,
                                     settings=settings)

    @app.post("/evaluate", response_model=S.EvaluateResponse, responses={422: {"model": S.ErrorResponse}})
    def evaluate(req: S.EvaluateRequest):
        entries = [runner.EvalEntry(it.name, S.decode_png(it.source, "source"), S.decode_png(it.edited, "edited"),
                                    S.decode_png(it.mask, "mask", mask=True), it.texture) for it in req.items]
        if req.networks not in app.state.evaluators:
            app.state.evaluators[req.networks] = evaluator_factory(req.networks)
        report = runner.evaluate_entries(entries, app.state.evaluators[req.networks])
        return S.EvaluateResponse(report=report.to_json(), text=report.to_text())

    return app
