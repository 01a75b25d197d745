# app/routes/runs.py
from flask import Blueprint, request, jsonify, current_app

from ..services.data_ingest import normalize_task

runs_bp = Blueprint("runs_bp", __name__)


def _store():
    svc = current_app.config.get("RECORD_STORE")
    if not svc:
        raise RuntimeError("RECORD_STORE is not configured in app.config")
    return svc


@runs_bp.route("", methods=["GET"])
def list_runs():
    try:
        page = int(request.args.get("page", 1))
        page_size = int(request.args.get("page_size", 50))
        n = request.args.get("n")
        filters = {
            "task": normalize_task(request.args["task"]) if request.args.get("task") else None,
            "method": request.args.get("method") or None,
            "n_shot": int(n) if n else None,
        }
        result = _store().get_paginated(page=page, page_size=page_size, **filters)
        return jsonify(result), 200
    except ValueError as e:
        return jsonify({"error": str(e)}), 400
    except Exception as e:
        current_app.logger.exception("list_runs failed")
        return jsonify({"error": str(e)}), 500


@runs_bp.route("/<record_id>", methods=["GET"])
def get_run(record_id):
    try:
        record = _store().get_by_id(record_id)
        if record is None:
            return jsonify({"error": f"run {record_id} not found"}), 404
        return jsonify(record), 200
    except Exception as e:
        current_app.logger.exception("get_run failed")
        return jsonify({"error": str(e)}), 500
