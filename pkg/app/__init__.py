import os
import logging
from flask import Flask
from .services.record_store import RunRecordStore

logging.basicConfig(
    level=os.environ.get("FADA_LOG_LEVEL", "INFO").upper(),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)


def create_app(config=None):
    app = Flask(__name__)

    app.config.update(
        DATA_DIR=os.environ.get("FADA_DATA_DIR", "data"),
        OUT_DIR=os.environ.get("FADA_OUT_DIR", "runs"),
        WORKERS=int(os.environ.get("FADA_WORKERS", "1")),
        HOST=os.environ.get("HOST", "0.0.0.0"),
        PORT=int(os.environ.get("PORT", "5001")),
    )
    if config:
        app.config.update(config)

    if app.config["WORKERS"] < 1:
        raise ValueError("FADA_WORKERS must be >= 1")

    logger.info(f"Initializing app with data dir {app.config['DATA_DIR']}, output dir {app.config['OUT_DIR']}")

    # 1. Run record store
    try:
        store = RunRecordStore(os.path.join(app.config["OUT_DIR"], "records"))
        app.config['RECORD_STORE'] = store
    except OSError as e:
        logger.error(f"Failed to open record store: {e}")
        raise

    # 2. CLI
    from .cli import fada_cli
    app.cli.add_command(fada_cli)

    # 3. Read-only API under /fada
    from .routes.health import health_bp
    from .routes.runs import runs_bp
    from .routes.report import report_bp

    app.register_blueprint(health_bp, url_prefix="/fada")
    app.register_blueprint(runs_bp,   url_prefix="/fada/runs")
    app.register_blueprint(report_bp, url_prefix="/fada")
    logger.info("✓ Blueprints registered under /fada")

    @app.errorhandler(404)
    def not_found(error):
        return {"error": "Not found"}, 404

    @app.errorhandler(500)
    def internal_error(error):
        logger.error(f"Internal error: {error}")
        return {"error": "Internal server error"}, 500

    @app.route('/')
    def root():
        return {
            "service": "Few-shot adversarial domain adaptation experiments",
            "version": "1.0",
            "base_path": "/fada",
            "endpoints": {
                "health": "/fada/health",
                "runs": "/fada/runs",
                "run": "/fada/runs/<record_id>",
                "report": {
                    "json": "/fada/report",
                    "csv": "/fada/report.csv",
                    "chart": "/fada/report/<task>.svg",
                },
            },
        }, 200

    return app
