from fastapi import FastAPI, File, UploadFile, Form, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
import uvicorn
import os
import tempfile
from pathlib import Path
import logging
from typing import Optional
import json

# Import our custom modules
from config import configure_logging, get_settings
from errors import ConfigValidationError, LabError, NumericalError
from experiments import BUILTIN_SYSTEMS, builtin_system, load_spec, run_experiment
from outputs import to_jsonable, write_result
from system_parser import SystemParser, system_to_dict

# Configure logging
configure_logging()
logger = logging.getLogger(__name__)

settings = get_settings()

# Initialize FastAPI app
app = FastAPI(
    title="Statistical Filtering Lab API",
    description="Closure-model forecasts, ensemble statistical filtering and grid reference solvers",
    version="1.0.0"
)

# Configure CORS
app.add_middleware(
    CORSMiddleware,
    allow_origins=["http://localhost:8080", "http://127.0.0.1:8080"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

system_parser = SystemParser()

# Run outputs
OUTPUT_DIR = settings.output_dir
OUTPUT_DIR.mkdir(parents=True, exist_ok=True)

# Upload size limit (1MB)
MAX_FILE_SIZE = 1024 * 1024
ALLOWED_EXTENSIONS = {'.json'}
API_SCENARIOS = {"truth", "forecast", "filter", "oracle", "twin"}


def lab_error_status(error: LabError) -> int:
    """HTTP status for a lab failure: 400 config, 422 numerical, 500 otherwise"""
    if isinstance(error, ConfigValidationError) or error.exit_code == ConfigValidationError.exit_code:
        return 400
    if isinstance(error, NumericalError) or error.exit_code == NumericalError.exit_code:
        return 422
    return 500


async def read_upload(file: UploadFile) -> str:
    """Validate extension and size of an uploaded system file and return its text"""
    if not file.filename:
        raise HTTPException(status_code=400, detail="No file provided")

    file_extension = Path(file.filename).suffix.lower()
    if file_extension not in ALLOWED_EXTENSIONS:
        raise HTTPException(
            status_code=400,
            detail=f"Unsupported file type. Allowed: {', '.join(ALLOWED_EXTENSIONS)}"
        )

    file_content = await file.read()
    if len(file_content) > MAX_FILE_SIZE:
        raise HTTPException(
            status_code=400,
            detail=f"File too large. Maximum size: {MAX_FILE_SIZE // 1024}KB"
        )
    try:
        return file_content.decode("utf-8")
    except UnicodeDecodeError:
        raise HTTPException(status_code=400, detail="System file must be UTF-8 text")


@app.get("/")
async def root():
    return {"message": "Statistical Filtering Lab API", "status": "running"}


@app.get("/health")
async def health_check():
    return {"status": "healthy", "service": "statistical-filter-lab"}


@app.post("/systems/validate")
async def validate_system(file: UploadFile = File(...)):
    """
    Parse an uploaded system file and report its dimensions

    Args:
        file: System definition (.json)
    """
    text = await read_upload(file)
    try:
        system = system_parser.parse_text(text, default_name=Path(file.filename).stem)
    except LabError as e:
        logger.info(f"Rejected system file {file.filename}: {e}")
        raise HTTPException(status_code=400, detail={
            "error": str(e),
            "key_path": getattr(e, "key_path", None),
            "line": getattr(e, "line", None),
        })
    except ValueError as e:
        raise HTTPException(status_code=400, detail={"error": str(e)})

    return JSONResponse({
        "success": True,
        "filename": file.filename,
        "system": system.describe(),
    })


@app.get("/systems/builtin/{name}")
async def describe_builtin(name: str):
    if name not in BUILTIN_SYSTEMS:
        raise HTTPException(
            status_code=404,
            detail=f"Unknown system '{name}'. Available: {', '.join(BUILTIN_SYSTEMS)}"
        )
    system = builtin_system(name)
    return JSONResponse({
        "success": True,
        "system": system.describe(),
        "definition": system_to_dict(system),
    })


@app.post("/experiments/{scenario}")
async def run_scenario(
    scenario: str,
    spec: str = Form(...),
    file: Optional[UploadFile] = File(None),
):
    """
    Run an experiment synchronously

    Args:
        scenario: truth, forecast, filter, oracle or twin
        spec: JSON experiment spec (same schema as the CLI --config file)
        file: Optional system definition replacing spec.system / spec.builtin
    """
    if scenario not in API_SCENARIOS:
        raise HTTPException(
            status_code=400,
            detail=f"Unsupported scenario. Allowed: {', '.join(sorted(API_SCENARIOS))}"
        )
    try:
        data = json.loads(spec)
    except json.JSONDecodeError as e:
        raise HTTPException(status_code=400, detail=f"Invalid spec JSON at line {e.lineno}: {e.msg}")
    if not isinstance(data, dict):
        raise HTTPException(status_code=400, detail="Spec must be a JSON object")
    data["scenario"] = scenario
    data.pop("output_dir", None)

    temp_file_path = None
    try:
        if file is not None and file.filename:
            text = await read_upload(file)
            with tempfile.NamedTemporaryFile("w", delete=False, suffix=".json") as temp_file:
                temp_file.write(text)
                temp_file_path = temp_file.name
            data["system"] = temp_file_path
            data.pop("builtin", None)

        parsed = load_spec(data)
        logger.info(f"Running scenario '{scenario}'")
        result = run_experiment(parsed)
        out_dir = OUTPUT_DIR / f"{scenario}-{parsed.seed}"
        files = write_result(result, out_dir, reproducible=settings.reproducible)

        return JSONResponse({
            "success": True,
            "scenario": scenario,
            "report": to_jsonable(result.report),
            "outputs": {name: str(path) for name, path in files.items()},
        })

    except HTTPException:
        raise
    except LabError as e:
        status = lab_error_status(e)
        logger.error(f"Scenario '{scenario}' failed: {e}")
        raise HTTPException(status_code=status, detail={
            "error": str(e),
            "type": type(e).__name__,
            "step": e.step_index,
        })
    except Exception as e:
        logger.error(f"Error running scenario: {str(e)}")
        raise HTTPException(status_code=500, detail=f"Experiment failed: {str(e)}")
    finally:
        # Clean up temporary file
        if temp_file_path and os.path.exists(temp_file_path):
            os.unlink(temp_file_path)


if __name__ == "__main__":
    uvicorn.run(
        "main:app",
        host=settings.host,
        port=settings.port,
        reload=True,
        log_level="info"
    )
