# app/routes/report.py
from flask import Blueprint, Response, request, jsonify, current_app

from ..services.data_ingest import normalize_task
from ..services.experiment_service import aggregate, render_chart

report_bp = Blueprint("report_bp", __name__)


def _report():
    store = current_app.config.get("RECORD_STORE")
    if not store:
        raise RuntimeError("RECORD_STORE is not configured in app.config")
    records = store.get_all()
    return aggregate(records) if records else None


@report_bp.route("/report", methods=["GET"])
def report_json():
    try:
        report = _report()
        if report is None:
            return jsonify({"error": "no run records"}), 404
        return jsonify(report.to_dict()), 200
    except Exception as e:
        current_app.logger.exception("report_json failed")
        return jsonify({"error": str(e)}), 500


@report_bp.route("/report.csv", methods=["GET"])
def report_csv():
    try:
        report = _report()
        if report is None:
            return jsonify({"error": "no run records"}), 404
        return Response(report.to_csv(), mimetype="text/csv")
    except Exception as e:
        current_app.logger.exception("report_csv failed")
        return jsonify({"error": str(e)}), 500


@report_bp.route("/report/<task>.svg", methods=["GET"])
def report_chart(task):
    try:
        name = normalize_task(task)
    except ValueError as e:
        return jsonify({"error": str(e)}), 400
    if request.args.get("capped") in ("1", "true", "yes"):
        name += " [capped]"
    try:
        report = _report()
        if report is None or name not in report.tasks():
            return jsonify({"error": f"no records for task {name}"}), 404
        return Response(render_chart(report, name), mimetype="image/svg+xml")
    except Exception as e:
        current_app.logger.exception("report_chart failed")
        return jsonify({"error": str(e)}), 500
