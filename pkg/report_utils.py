"""
Report formatting utilities
Fixed-width text tables for the terminal and PDF reports rendered with reportlab
"""

import io
from typing import Any, Dict, List, Optional, Sequence

from reportlab.lib import colors
from reportlab.lib.pagesizes import A4
from reportlab.lib.styles import getSampleStyleSheet
from reportlab.platypus import Paragraph, SimpleDocTemplate, Spacer, Table, TableStyle


def format_cell(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    if value is None:
        return '-'
    return str(value)


class ReportFormatter:
    """Handles fixed-width formatting of command results"""

    def __init__(self, width: int = 72):
        """
        Initialize report formatter

        Args:
            width: Line width in characters
        """
        self.width = width

    def center_text(self, text: str) -> str:
        """Center text within the line width"""
        if len(text) >= self.width:
            return text
        padding = (self.width - len(text)) // 2
        return ' ' * padding + text

    def left_right_text(self, left: str, right: str) -> str:
        """Align text with left and right justification"""
        total_len = len(left) + len(right)
        if total_len >= self.width:
            return left + ' ' + right
        return left + ' ' * (self.width - total_len) + right

    def create_line(self, char: str = '-') -> str:
        return char * self.width

    def format_header(self, title: str) -> str:
        return '\n'.join([self.center_text(title), self.create_line('=')])

    def format_section_header(self, title: str) -> str:
        return '\n'.join([title, self.create_line('-')])

    def format_table(self, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
        """Right-aligned columns sized to their widest cell"""
        cells = [[str(h) for h in header]] + [[format_cell(v) for v in row] for row in rows]
        widths = [max(len(row[k]) for row in cells) for k in range(len(header))]
        lines = ['  '.join(cell.rjust(w) for cell, w in zip(row, widths)) for row in cells]
        lines.insert(1, '  '.join('-' * w for w in widths))
        return '\n'.join(lines)

    def format_key_values(self, pairs: Dict[str, Any]) -> str:
        return '\n'.join(self.left_right_text(f"{key}:", format_cell(value)) for key, value in pairs.items())


def fit_summary(report: Dict[str, Any]) -> Dict[str, Any]:
    return {
        'objective (MHz^2)': report['objective'],
        'baseline objective (MHz^2)': report['baseline_objective'],
        'converged': report['converged'],
        'iterations': report['iterations'],
        'restarts used': report['restarts_used'],
        'config hash': report['config_hash'],
    }


def format_fit_report(report: Dict[str, Any], header: Sequence[str], rows: Sequence[Sequence[Any]],
                      formatter: Optional[ReportFormatter] = None) -> str:
    """Human-readable fit report: summary, fitted offsets, per-line residuals"""
    formatter = formatter or ReportFormatter()
    lines = [formatter.format_header("SPIN HAMILTONIAN FIT"), '']
    lines.append(formatter.format_key_values(fit_summary(report)))
    lines.append('')
    lines.append(formatter.format_section_header("PARAMETER OFFSETS (MHz)"))
    lines.append(formatter.format_table(['parameter', 'offset'], sorted(report['parameters'].items())))
    lines.append('')
    lines.append(formatter.format_section_header("LINES"))
    lines.append(formatter.format_table(header, rows))
    return '\n'.join(lines) + '\n'


def format_result_table(title: str, header: Sequence[str], rows: Sequence[Sequence[Any]],
                        metadata: Dict[str, Any], formatter: Optional[ReportFormatter] = None) -> str:
    formatter = formatter or ReportFormatter()
    lines = [formatter.format_header(title.upper()), formatter.format_key_values(metadata), '',
             formatter.format_table(header, rows)]
    return '\n'.join(lines) + '\n'


def _pdf_table(data: List[List[str]]) -> Table:
    table = Table(data, hAlign='LEFT')
    table.setStyle(TableStyle([
        ('FONTNAME', (0, 0), (-1, 0), 'Helvetica-Bold'),
        ('FONTSIZE', (0, 0), (-1, -1), 8),
        ('LINEBELOW', (0, 0), (-1, 0), 0.5, colors.black),
        ('ALIGN', (1, 0), (-1, -1), 'RIGHT'),
    ]))
    return table


def render_fit_pdf(report: Dict[str, Any], header: Sequence[str], rows: Sequence[Sequence[Any]]) -> bytes:
    """
    PDF version of the fit report

    Args:
        report: JSON report of the fit command
        header: column names of the per-line table
        rows: per-line rows (observed, predicted, residual, uncertainty)

    Returns:
        bytes: the PDF document; identical input gives identical bytes
    """
    buffer = io.BytesIO()
    document = SimpleDocTemplate(buffer, pagesize=A4, title="Spin Hamiltonian fit", invariant=1)
    styles = getSampleStyleSheet()
    story = [Paragraph("Spin Hamiltonian fit", styles['Title']), Spacer(1, 12)]

    story.append(_pdf_table([['quantity', 'value']] +
                            [[key, format_cell(value)] for key, value in fit_summary(report).items()]))
    story.append(Spacer(1, 12))
    story.append(Paragraph("Parameter offsets (MHz)", styles['Heading2']))
    parameters = sorted(report['parameters'].items())
    story.append(_pdf_table([['parameter', 'offset']] + [[name, format_cell(value)] for name, value in parameters]))
    story.append(Spacer(1, 12))
    story.append(Paragraph("Lines", styles['Heading2']))
    story.append(_pdf_table([list(header)] + [[format_cell(v) for v in row] for row in rows]))

    document.build(story)
    return buffer.getvalue()
