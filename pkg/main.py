"""
FastAPI application for the multimodal diffusion experiments
"""
from fastapi import FastAPI, HTTPException, status
from fastapi.middleware.cors import CORSMiddleware
import logging

from config import settings
from exceptions import ArtifactNotFoundError, ConfigError, MultimodalDiffusionError
from experiment_service import ExperimentService, apply_overrides, load_config
from acceptance_rules import ACCEPTANCE_RULES, get_all_rules
from models import (
    AcceptanceReport,
    ConsistencyRequest,
    ConsistencyResponse,
    EvaluateRequest,
    HealthCheckResponse,
    ReconstructRequest,
    ReconstructResponse,
)

# Configure logging
logging.basicConfig(
    level=getattr(logging, settings.log_level.upper(), logging.INFO),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

app = FastAPI(
    title=settings.api_title,
    description=settings.api_description,
    version=settings.api_version,
    docs_url="/docs",
    redoc_url="/redoc",
    openapi_url="/openapi.json"
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


@app.middleware("http")
async def log_requests(request, call_next):
    logger.info(f"Incoming request: {request.method} {request.url.path}")
    response = await call_next(request)
    logger.info(f"Response status: {response.status_code}")
    return response


def get_service() -> ExperimentService:
    """Service over the configured experiment; the settings output_dir wins when no config file is set"""
    config = load_config(settings.experiment_config)
    if settings.experiment_config is None:
        config = apply_overrides(config, {"output_dir": settings.output_dir})
    return ExperimentService(config, max_workers=settings.max_workers)


def to_http_error(e: Exception, action: str) -> HTTPException:
    """Map package errors onto HTTP status codes, logging the failure first"""
    logger.error(f"Error in {action}: {str(e)}")
    if isinstance(e, ArtifactNotFoundError):
        code = status.HTTP_404_NOT_FOUND
    elif isinstance(e, (ConfigError, ValueError)):
        code = status.HTTP_400_BAD_REQUEST
    else:
        code = status.HTTP_500_INTERNAL_SERVER_ERROR
    return HTTPException(status_code=code, detail=f"Failed to {action}: {str(e)}")


@app.get(
    "/health",
    response_model=HealthCheckResponse,
    tags=["System"],
    summary="Health check endpoint",
    description="Check if the API is running and healthy"
)
async def health_check():
    """Health check endpoint"""
    return HealthCheckResponse(
        status="healthy",
        version=settings.api_version
    )


@app.get(
    "/api/v1/rules",
    tags=["Acceptance"],
    summary="List acceptance rules",
    description="Catalogue of the trend and threshold rules evaluated by /api/v1/evaluate"
)
async def list_rules():
    """List acceptance rules"""
    return {"total_rules": len(ACCEPTANCE_RULES), "rules": get_all_rules()}


@app.post(
    "/api/v1/reconstruct",
    response_model=ReconstructResponse,
    tags=["Reconstruction"],
    summary="Reconstruct one validation field",
    description="Observe a fraction of the main modality (plus the auxiliary field for multimodal checkpoints) and sample the posterior"
)
def reconstruct_field(request: ReconstructRequest):
    """Run one reconstruction against the stored dataset"""
    try:
        service = get_service()
        return service.reconstruct(
            request.checkpoint,
            request.fraction,
            sigma=request.sigma,
            seed=request.seed,
            particles=request.particles,
        )
    except (MultimodalDiffusionError, ValueError, OSError) as e:
        raise to_http_error(e, "reconstruct field")


@app.post(
    "/api/v1/consistency",
    response_model=ConsistencyResponse,
    tags=["Reconstruction"],
    summary="Check consistency of generated modalities",
    description="Relative l2 error between the forward model applied to generated main fields and the generated auxiliary fields"
)
def check_consistency(request: ConsistencyRequest):
    """Consistency of unconditional multimodal samples"""
    try:
        service = get_service()
        return service.consistency(request.checkpoint, n=request.n, seed=request.seed)
    except (MultimodalDiffusionError, ValueError, OSError) as e:
        raise to_http_error(e, "check consistency")


@app.post(
    "/api/v1/evaluate",
    response_model=AcceptanceReport,
    tags=["Acceptance"],
    summary="Evaluate acceptance rules",
    description="Evaluate every rule whose input table exists in the output directory"
)
def evaluate(request: EvaluateRequest):
    """Acceptance report over an output directory"""
    try:
        service = get_service()
        report = service.evaluate(request.output_dir)
        logger.info(f"Evaluation completed with grade {report.grade}")
        return report
    except (MultimodalDiffusionError, ValueError, OSError) as e:
        raise to_http_error(e, "evaluate outputs")


if __name__ == "__main__":
    import uvicorn
    uvicorn.run(app, host=settings.host, port=settings.port)
