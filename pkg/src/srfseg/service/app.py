"""HTTP facade over the core package.

Commands run synchronously in the request handler: desk-scale runs finish
in minutes and the CLI is the only expected client.  Domain errors map to
400 with the exception text; filesystem failures map to 500.
"""

import math

from fastapi import FastAPI, HTTPException
from fastapi.responses import JSONResponse

from .. import __version__
from .. import config as cfgmod
from ..errors import (CheckpointMismatchError, ConfigError, DivergenceError,
                      EmptyBatchError, FormatError, IoError, ShapeError)
from ..gradsuite import THRESHOLD, run_suite
from ..train import VARIANT_ROWS, run_ablate, run_eval, run_train
from .models import (AblateRequest, AblateResponse, AblateRow, EvalRequest,
                     EvalResponse, GradcheckRequest, GradcheckResponse,
                     GradcheckRow, HealthResponse, TrainRequest, TrainResponse)

_DOMAIN_ERRORS = (ConfigError, ShapeError, FormatError, EmptyBatchError,
                  DivergenceError, CheckpointMismatchError)


def _resolve(req):
    return cfgmod.resolve(config_text=req.config_text or None, seed=req.seed,
                          out=req.out, variant=req.variant)


def create_app():
    app = FastAPI(title="srfseg", version=__version__)

    @app.exception_handler(IoError)
    async def _io_error(request, exc):
        return JSONResponse(status_code=500, content={"detail": str(exc)})

    @app.get("/health", response_model=HealthResponse)
    def health():
        return HealthResponse(status="ok", version=__version__)

    @app.post("/train", response_model=TrainResponse)
    def train(req: TrainRequest):
        try:
            config = _resolve(req)
            checkpoint = run_train(config, log=None)
        except _DOMAIN_ERRORS as e:
            raise HTTPException(status_code=400, detail=str(e))
        return TrainResponse(checkpoint=checkpoint,
                             metrics_csv=f"{config.out}/metrics.csv",
                             out=config.out, steps=config.train.steps)

    @app.post("/eval", response_model=EvalResponse)
    def evaluate(req: EvalRequest):
        try:
            config = _resolve(req)
            result = run_eval(config, checkpoint=req.checkpoint,
                              oracle=req.oracle, dump=req.dump, log=None)
        except _DOMAIN_ERRORS as e:
            raise HTTPException(status_code=400, detail=str(e))
        per_class = [None if math.isnan(v) else v for v in result["per_class"]]
        return EvalResponse(per_class=per_class, miou=result["miou"],
                            boundary_f_tol1=result["boundary_f_tol1"],
                            boundary_f_tol3=result["boundary_f_tol3"],
                            scenes=result["scenes"], csv=f"{config.out}/eval.csv")

    @app.post("/gradcheck", response_model=GradcheckResponse)
    def gradcheck(req: GradcheckRequest):
        try:
            rows = run_suite(names=req.targets, seed=req.seed, corrupt=req.corrupt)
        except _DOMAIN_ERRORS as e:
            raise HTTPException(status_code=400, detail=str(e))
        if req.targets and not rows:
            raise HTTPException(status_code=400,
                                detail=f"no registered targets match {req.targets}")
        out = [GradcheckRow(target=n, max_rel_error=e, passed=ok) for n, e, ok in rows]
        return GradcheckResponse(rows=out, all_passed=all(r.passed for r in out),
                                 threshold=THRESHOLD)

    @app.post("/ablate", response_model=AblateResponse)
    def ablate(req: AblateRequest):
        try:
            config = _resolve(req)
            result = run_ablate(config, log=None)
        except _DOMAIN_ERRORS as e:
            raise HTTPException(status_code=400, detail=str(e))
        rows = []
        for name, upsampler, context in VARIANT_ROWS:
            mm, ms = result["miou"][name]
            b1m, b1s = result["boundary_f_tol1"][name]
            b3m, b3s = result["boundary_f_tol3"][name]
            rows.append(AblateRow(variant=name, upsampler=upsampler, context=context,
                                  miou_mean=mm, miou_std=ms, bf1_mean=b1m, bf1_std=b1s,
                                  bf3_mean=b3m, bf3_std=b3s))
        with open(result["table"], "r", encoding="utf-8") as fh:
            table_text = fh.read()
        return AblateResponse(rows=rows, csv=result["csv"],
                              table_path=result["table"], table_text=table_text)

    return app
