import logging
from typing import Dict, List, Optional, Sequence

from harness.evaluate import EvalReport
from harness.flops_table import FlopsRow
from model.flops import format_delta, gflops

logger = logging.getLogger(__name__)


def _table(header: Sequence[str], rows: List[Sequence[str]]) -> str:
    """Left-aligned first column, right-aligned numbers."""
    widths = [max(len(str(cell)) for cell in column) for column in zip(header, *rows)]
    lines = []
    for i, row in enumerate([header] + rows):
        cells = [str(row[0]).ljust(widths[0])] + [str(c).rjust(w) for c, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


class ReportManager:
    def __init__(self):
        """Format evaluation and FLOPs results for the terminal and for disk."""
        self.lines: List[str] = []

    def eval_table(self, report: EvalReport) -> str:
        title = f"{report.n_way}-way {report.k_shot}-shot, {report.q_query} queries per class"
        if report.sparse_ratio:
            title += f", sparse ratio {report.sparse_ratio:g}"
        rows = []
        for name, result in report.results.items():
            rows.append([name, f"{result.accuracy:.2f}", f"{result.ci95:.2f}", str(result.episodes),
                         f"{gflops(result.flops / max(1, result.episodes)):.4f}"])
        return title + "\n" + _table(["method", "acc %", "+-95%", "episodes", "GFLOPs/ep"], rows)

    def flops_table(self, rows: Sequence[FlopsRow]) -> str:
        measured = any(row.throughput is not None for row in rows)
        header = ["plan", "GFLOPs", "train GFLOPs", "delta"] + (["img/s"] if measured else [])
        body = []
        for row in rows:
            cells = [row.label, f"{gflops(row.flops):.2f}", f"{gflops(row.train_flops):.2f}", format_delta(row.delta)]
            if measured:
                cells.append("" if row.throughput is None else f"{row.throughput:.1f}")
            body.append(cells)
        return _table(header, body)

    def eval_document(self, report: EvalReport) -> Dict:
        return report.as_dict()

    def timings_document(self, report: Optional[EvalReport] = None, rows: Sequence[FlopsRow] = ()) -> Dict:
        """Wall-clock numbers, kept out of the reproducible reports."""
        document: Dict = {}
        if report is not None:
            document["episodes_per_second"] = {m: round(v, 3) for m, v in report.throughput.items()}
        if rows:
            document["images_per_second"] = {r.label: round(r.throughput, 3) for r in rows
                                             if r.throughput is not None}
        return document

    def flops_document(self, rows: Sequence[FlopsRow]) -> Dict:
        return {"rows": [{"plan": r.label, "flops": r.flops, "train_flops": r.train_flops,
                          "delta": round(r.delta, 6)} for r in rows]}

    def show(self, text: str) -> None:
        """Print a finished table and keep it for the run summary."""
        self.lines.append(text)
        print(text)
