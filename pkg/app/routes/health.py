from flask import Blueprint, jsonify, current_app
from datetime import datetime
import os

health_bp = Blueprint("health_bp", __name__)

@health_bp.route("/health", methods=["GET"])
def health_check():
    store = current_app.config.get("RECORD_STORE")
    return jsonify({
        "status": "healthy",
        "record_store": bool(store and os.path.isdir(store.root)),
        "records": len(store.ids()) if store else 0,
        "data_dir": os.path.isdir(current_app.config.get("DATA_DIR", "")),
        "timestamp": datetime.now().isoformat()
    })
