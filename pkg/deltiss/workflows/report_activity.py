import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import markdown
from pydantic import BaseModel
from temporalio import activity

logger = logging.getLogger(__name__)

try:
    import weasyprint

    WEASYPRINT_AVAILABLE = True
except (ImportError, OSError) as e:
    weasyprint = None
    WEASYPRINT_AVAILABLE = False
    logger.warning(f"WeasyPrint not available: {e}")


class ReportRequest(BaseModel):
    """Markdown report to render next to the run artifacts"""

    markdown_content: str
    title: str = "Design report"
    out_dir: str = "out"
    stem: str = "report"


@dataclass
class ReportResult:
    html_file_path: str
    pdf_file_path: str
    success: bool
    error_message: Optional[str] = None


def _html_document(markdown_content: str, title: str) -> str:
    body = markdown.markdown(markdown_content, extensions=["tables", "fenced_code"])
    return f"""<!DOCTYPE html>
<html>
<head>
<meta charset="UTF-8">
<title>{title}</title>
<style>{_CSS}</style>
</head>
<body>
<h1 class="document-title">{title}</h1>
{body}
</body>
</html>
"""


def render_markdown_report(request: ReportRequest) -> ReportResult:
    """Write ``<stem>.html`` and, when weasyprint is importable, ``<stem>.pdf``."""
    out_dir = Path(request.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    html = _html_document(request.markdown_content, request.title)
    html_path = out_dir / f"{request.stem}.html"
    html_path.write_text(html)

    if not WEASYPRINT_AVAILABLE or weasyprint is None:
        return ReportResult(
            html_file_path=str(html_path),
            pdf_file_path="",
            success=False,
            error_message="weasyprint library not available",
        )
    pdf_path = out_dir / f"{request.stem}.pdf"
    try:
        weasyprint.HTML(string=html).write_pdf(str(pdf_path))
    except Exception as e:
        logger.warning(f"PDF rendering failed: {e}")
        return ReportResult(
            html_file_path=str(html_path), pdf_file_path="", success=False, error_message=str(e)
        )
    return ReportResult(html_file_path=str(html_path), pdf_file_path=str(pdf_path), success=True)


@activity.defn
async def render_report(request: ReportRequest) -> ReportResult:
    activity.logger.info(f"Rendering report '{request.title}' into {request.out_dir}")
    return render_markdown_report(request)


_CSS = """
body { font-family: 'Helvetica Neue', Arial, sans-serif; line-height: 1.5; color: #333;
       max-width: 800px; margin: 0 auto; padding: 20px; }
.document-title { color: #2c3e50; border-bottom: 3px solid #3498db; padding-bottom: 10px; }
h2 { color: #34495e; margin-top: 25px; }
code, pre { font-family: 'Menlo', 'Ubuntu Mono', monospace; background-color: #f8f9fa; }
table { width: 100%; border-collapse: collapse; margin: 15px 0; }
th, td { border: 1px solid #ddd; padding: 6px 10px; text-align: right; }
th { background-color: #f8f9fa; }
@page { margin: 1in; @bottom-center { content: counter(page); font-size: 10px; color: #666; } }
"""
