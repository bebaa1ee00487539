"""
Reproduction report generation
Trade-off figures as standalone plotly HTML and a PDF bundling the result
tables, probe similarities and run metadata. The PDF build is invariant so
identical ledgers give identical bytes.
"""

from __future__ import annotations

import io
import logging
from collections.abc import Mapping
from pathlib import Path
from typing import Any

import plotly.graph_objects as go
from reportlab.lib import colors
from reportlab.lib.enums import TA_CENTER
from reportlab.lib.pagesizes import letter
from reportlab.lib.styles import ParagraphStyle, getSampleStyleSheet
from reportlab.lib.units import inch
from reportlab.platypus import Paragraph, SimpleDocTemplate, Spacer, Table, TableStyle

from modules.artifacts import atomic_write_bytes, atomic_write_text
from modules.metrics import CLUSTERER_NAMES, EMBEDDER_NAMES, METRIC_KEYS, TABLE1_ROWS, format_cell

logger = logging.getLogger(__name__)

METHOD_LABELS = dict(TABLE1_ROWS)
METRIC_COLORS = {"ap": "#4ECDC4", "spd": "#FF6B6B", "eod": "#45B7D1"}


def _cells(entry: Mapping[str, Any]) -> list[str]:
    return [format_cell(*entry["summary"][m]) for m in METRIC_KEYS]


class ReportGenerator:
    """PDF report over one reproduction result (table, ledger, probes)"""

    def __init__(self):
        self.styles = getSampleStyleSheet()
        self.setup_custom_styles()

    def setup_custom_styles(self):
        self.styles.add(ParagraphStyle(
            name="ReportTitle",
            parent=self.styles["Title"],
            fontSize=22,
            spaceAfter=24,
            textColor=colors.HexColor("#2d3748"),
            alignment=TA_CENTER,
        ))
        self.styles.add(ParagraphStyle(
            name="SectionHeader",
            parent=self.styles["Heading1"],
            fontSize=15,
            spaceAfter=10,
            spaceBefore=18,
            textColor=colors.HexColor("#4a5568"),
        ))
        self.styles.add(ParagraphStyle(
            name="SubsectionHeader",
            parent=self.styles["Heading2"],
            fontSize=12,
            spaceAfter=8,
            spaceBefore=12,
            textColor=colors.HexColor("#2d3748"),
        ))

    def create_header_footer(self, canvas, doc):
        canvas.saveState()
        canvas.setFont("Helvetica-Bold", 9)
        canvas.setFillColor(colors.HexColor("#4a5568"))
        canvas.drawString(50, letter[1] - 50, "proxyfair - fairness with generated proxy sensitive labels")
        canvas.setFont("Helvetica", 8)
        canvas.setFillColor(colors.grey)
        canvas.drawString(50, 50, f"config {doc.config_hash[:12]}")
        canvas.drawString(letter[0] - 100, 50, f"Page {canvas.getPageNumber()}")
        canvas.restoreState()

    def _table(self, rows: list[list[str]], col_widths: list[float] | None = None) -> Table:
        table = Table(rows, colWidths=col_widths, repeatRows=1)
        table.setStyle(TableStyle([
            ("BACKGROUND", (0, 0), (-1, 0), colors.HexColor("#f7fafc")),
            ("FONTNAME", (0, 0), (-1, 0), "Helvetica-Bold"),
            ("FONTNAME", (0, 1), (-1, -1), "Helvetica"),
            ("FONTSIZE", (0, 0), (-1, -1), 8),
            ("ALIGN", (0, 0), (-1, -1), "CENTER"),
            ("VALIGN", (0, 0), (-1, -1), "MIDDLE"),
            ("GRID", (0, 0), (-1, -1), 0.5, colors.grey),
        ]))
        return table

    def _new_document(self, buffer: io.BytesIO, title: str, config_hash: str) -> SimpleDocTemplate:
        doc = SimpleDocTemplate(
            buffer, pagesize=letter,
            rightMargin=54, leftMargin=54, topMargin=90, bottomMargin=72,
            title=title, author="proxyfair", invariant=1,
        )
        doc.config_hash = config_hash
        return doc

    def _results_section(self, result: Mapping[str, Any]) -> list:
        story: list = [Paragraph("Results", self.styles["SectionHeader"])]
        if result["table"] == "table1":
            story.append(Paragraph(
                "Downstream classifier trained with the true sensitive labels. "
                "Cells are mean ± std over the mitigation seeds.", self.styles["Normal"]))
            rows = [["Method", "AP", "SPD", "EOD"]]
            rows += [[METHOD_LABELS.get(e["algorithm"], e["algorithm"])] + _cells(e) for e in result["ledger"]]
            story.append(self._table(rows, [2.2 * inch] + [1.3 * inch] * 3))
        else:
            story.append(Paragraph(
                "Mitigators consume proxy sensitive labels generated by each embedder and clusterer; "
                "metrics are audited against the true labels.", self.styles["Normal"]))
            rows = [["Embedding", "Clustering", "Mitigator", "AP", "SPD", "EOD"]]
            for e in result["ledger"]:
                rows.append([
                    EMBEDDER_NAMES.get(e["embedder"], e["embedder"]),
                    CLUSTERER_NAMES.get(e["clusterer"], e["clusterer"]),
                    METHOD_LABELS.get(e["algorithm"], e["algorithm"]),
                ] + _cells(e))
            story.append(self._table(rows, [1.1 * inch, 1.0 * inch, 1.6 * inch] + [1.0 * inch] * 3))
        return story

    def _probe_section(self, probes: list[Mapping[str, Any]]) -> list:
        story: list = [Paragraph("Embedding probes", self.styles["SectionHeader"])]
        if not probes:
            story.append(Paragraph("No probes were run for this table.", self.styles["Normal"]))
            return story
        story.append(Paragraph(
            "Cosine similarity between the weight vectors of linear probes trained on the frozen "
            "embeddings. A positive gap means the proxy direction is closer to the true sensitive "
            "direction than to the downstream label direction.", self.styles["Normal"]))
        rows = [["Embedding", "Clustering", "cos(proxy, S)", "cos(proxy, Y)", "gap"]]
        for p in probes:
            rows.append([
                EMBEDDER_NAMES.get(p["embedder"], p["embedder"]),
                CLUSTERER_NAMES.get(p["clusterer"], p["clusterer"]),
                f"{p['cos_proxy_true']:.3f}",
                f"{p['cos_proxy_downstream']:.3f}",
                f"{p['gap']:+.3f}",
            ])
        story.append(self._table(rows))
        return story

    def _metadata_section(self, result: Mapping[str, Any], config: Mapping[str, Any]) -> list:
        story: list = [Paragraph("Run metadata", self.styles["SectionHeader"])]
        mitigation = config.get("mitigation", {})
        rows = [
            ["Config hash", result["config_hash"][:16]],
            ["Data source", str(config.get("data", {}).get("source", ""))],
            ["Global seed", str(config.get("seed", ""))],
            ["Mitigation seeds", ", ".join(str(s) for s in mitigation.get("seeds", ()))],
            ["Adversary weight", str(mitigation.get("alpha", ""))],
            ["Mixup weights (dp / eo)", f"{mitigation.get('lambda_dp', '')} / {mitigation.get('lambda_eo', '')}"],
        ]
        table = self._table([["Field", "Value"]] + rows, [2.2 * inch, 3.2 * inch])
        story.append(table)
        return story

    def generate_reproduction_report(self, result: Mapping[str, Any], config: Mapping[str, Any]) -> io.BytesIO:
        buffer = io.BytesIO()
        title = "Table 1: true sensitive labels" if result["table"] == "table1" else "Table 2: generated proxy labels"
        doc = self._new_document(buffer, title, result["config_hash"])
        story = [Paragraph(title, self.styles["ReportTitle"]), Spacer(1, 12)]
        story += self._results_section(result)
        story += self._probe_section(result.get("probes", []))
        story += self._metadata_section(result, config)
        doc.build(story, onFirstPage=self.create_header_footer, onLaterPages=self.create_header_footer)
        buffer.seek(0)
        return buffer

    def generate_probe_report(self, result: Mapping[str, Any]) -> io.BytesIO:
        buffer = io.BytesIO()
        doc = self._new_document(buffer, "Embedding probes", result["config_hash"])
        story = [Paragraph("Embedding probe summary", self.styles["ReportTitle"]), Spacer(1, 12)]
        story += self._probe_section(result.get("probes", []))
        doc.build(story, onFirstPage=self.create_header_footer, onLaterPages=self.create_header_footer)
        buffer.seek(0)
        return buffer


# ---------------------------------------------------------------- figures

def tradeoff_figure(entries: list[Mapping[str, Any]], title: str) -> go.Figure:
    """Grouped bars of AP / SPD / EOD per ledger entry with std error bars"""
    labels = []
    for e in entries:
        label = METHOD_LABELS.get(e["algorithm"], e["algorithm"])
        if "clusterer" in e:
            label = f"{CLUSTERER_NAMES.get(e['clusterer'], e['clusterer'])}<br>{label}"
        labels.append(label)

    fig = go.Figure()
    for metric in METRIC_KEYS:
        fig.add_trace(go.Bar(
            x=labels,
            y=[e["summary"][metric][0] for e in entries],
            error_y=dict(type="data", array=[e["summary"][metric][1] for e in entries]),
            name=metric.upper(),
            marker_color=METRIC_COLORS[metric],
        ))
    fig.update_layout(
        title=title,
        barmode="group",
        yaxis=dict(title="score", range=[0, 1]),
        height=450,
        legend=dict(orientation="h", y=-0.2),
    )
    return fig


def tradeoff_figures(result: Mapping[str, Any]) -> dict[str, go.Figure]:
    """One figure for Table 1; one per embedder for Table 2"""
    ledger = result["ledger"]
    if result["table"] == "table1":
        return {"table1-tradeoff": tradeoff_figure(ledger, "True sensitive labels")}
    figures = {}
    for embedder in dict.fromkeys(e["embedder"] for e in ledger):
        entries = [e for e in ledger if e["embedder"] == embedder]
        name = EMBEDDER_NAMES.get(embedder, embedder)
        figures[f"table2-{embedder}-tradeoff"] = tradeoff_figure(entries, f"{name} proxy labels")
    return figures


def write_reproduction_outputs(reports_dir: Path, result: Mapping[str, Any], config: Any) -> list[Path]:
    """Write the trade-off HTML figures and the PDF next to the table JSON"""
    config_dict = config.to_dict() if hasattr(config, "to_dict") else dict(config)
    written = []
    for name, fig in tradeoff_figures(result).items():
        html = fig.to_html(include_plotlyjs="cdn", full_html=True, div_id=name)
        written.append(atomic_write_text(reports_dir / f"{name}.html", html))
    pdf = generate_report("reproduction", result, config_dict)
    written.append(atomic_write_bytes(reports_dir / f"{result['table']}.pdf", pdf.getvalue()))
    logger.info("Wrote %d report files for %s", len(written), result["table"])
    return written


def generate_report(report_type: str, result: Mapping[str, Any],
                    config: Mapping[str, Any] | None = None) -> io.BytesIO:
    generator = ReportGenerator()
    if report_type == "reproduction":
        return generator.generate_reproduction_report(result, config or {})
    if report_type == "probes":
        return generator.generate_probe_report(result)
    raise ValueError(f"Unknown report type: {report_type}")


def get_available_report_types() -> dict:
    return {
        "reproduction": {
            "name": "Reproduction report",
            "description": "Result table, probe similarities and run metadata for one reproduced table",
            "includes": ["Result table", "Embedding probes", "Run metadata"],
        },
        "probes": {
            "name": "Probe summary",
            "description": "Cosine similarities between proxy, sensitive and downstream probe weights",
            "includes": ["Embedding probes"],
        },
    }
