#!/usr/bin/env python3
"""
Startup script for the lab's FastAPI server
"""

import sys
import logging
from pathlib import Path

from config import configure_logging, get_settings

configure_logging()
logger = logging.getLogger(__name__)


def check_dependencies():
    """Check if required dependencies are installed"""
    try:
        import fastapi
        import uvicorn
        import numpy
        import scipy
        import pandas
        import pydantic
        logger.info("✅ All required dependencies are available")
        return True
    except ImportError as e:
        logger.error(f"❌ Missing dependency: {e}")
        logger.info("Please install dependencies: pip install -r requirements.txt")
        return False


def check_builtin_systems():
    """Build every builtin system once"""
    try:
        from experiments import BUILTIN_SYSTEMS, builtin_system
        for name in BUILTIN_SYSTEMS:
            system = builtin_system(name)
            logger.info(f"🧮 {name}: d={system.d}")
        return True
    except Exception as e:
        logger.warning(f"⚠️ Builtin systems failed to load: {e}")
        return False


def create_directories(settings):
    """Create necessary directories"""
    for directory in [settings.output_dir, Path("logs")]:
        Path(directory).mkdir(parents=True, exist_ok=True)
        logger.info(f"📁 Created/verified directory: {directory}")


def start_server(settings):
    """Start the FastAPI server"""
    logger.info("🚀 Starting FastAPI server...")

    try:
        import uvicorn
        uvicorn.run(
            "main:app",
            host=settings.host,
            port=settings.port,
            reload=True,
            log_level="info",
            access_log=True
        )
    except KeyboardInterrupt:
        logger.info("🛑 Server stopped by user")
    except Exception as e:
        logger.error(f"❌ Server error: {e}")


def main():
    """Main startup function"""
    logger.info("🔧 Statistical Filtering Lab Server Startup")
    logger.info("=" * 50)

    if not check_dependencies():
        sys.exit(1)

    settings = get_settings()
    create_directories(settings)
    check_builtin_systems()

    logger.info(f"🌐 Server will be available at: http://localhost:{settings.port}")
    logger.info(f"📚 API documentation: http://localhost:{settings.port}/docs")
    logger.info("=" * 50)

    start_server(settings)


if __name__ == "__main__":
    main()
