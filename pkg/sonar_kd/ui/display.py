"""Rich-based terminal output: logging setup, report and inventory tables, training progress."""

import json
import logging
import sys
from contextlib import contextmanager
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, TextIO, Tuple

from rich import box
from rich.console import Console
from rich.logging import RichHandler
from rich.panel import Panel
from rich.progress import BarColumn, MofNCompleteColumn, Progress, TextColumn, TimeElapsedColumn
from rich.table import Table

from sonar_kd.core.evalmetrics import REPORT_COLUMNS, EvalReport
from sonar_kd.protocols import ErrorEnvelope, LayerInfo, LossRecord

LOG_FORMAT = "%(message)s"


def configure_logging(verbose: bool = False, console: Optional[Console] = None) -> None:
    """Route the package loggers through a RichHandler on stderr."""
    handler = RichHandler(
        console=console or Console(stderr=True, emoji=False),
        show_path=verbose,
        rich_tracebacks=verbose,
        markup=False,
    )
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root = logging.getLogger("sonar_kd")
    root.handlers = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    root.propagate = False


def write_error(envelope: ErrorEnvelope, stream: Optional[TextIO] = None) -> None:
    """One-line JSON error for scripts; always plain text, never styled."""
    stream = stream or sys.stderr
    stream.write(json.dumps(envelope, sort_keys=True, default=str) + "\n")
    stream.flush()


class RichDisplay:
    """Console output of the sonar-kd commands."""

    def __init__(self, console: Optional[Console] = None) -> None:
        # Emoji off keeps column widths predictable in CI logs
        self.console: Console = console or Console(emoji=False)

    def report_table(self, rows: Iterable[Tuple[str, EvalReport]], title: str = "Evaluation") -> Table:
        table = Table(title=title, box=box.SIMPLE_HEAVY, header_style="bold bright_cyan")
        table.add_column("model", style="bold")
        headers = list(REPORT_COLUMNS)
        # The two FP columns are box-level and video-level.
        headers[-1] = "Video FP"
        for name in headers:
            table.add_column(name, justify="right")
        for label, rep in rows:
            table.add_row(label, *(f"{value:.2f}" for value in rep.row()))
        return table

    def show_report(self, rows: Sequence[Tuple[str, EvalReport]], title: str = "Evaluation") -> None:
        self.console.print(self.report_table(rows, title))
        for label, rep in rows:
            self.console.print(
                f"[dim]{label}: {rep.num_frames} frames, {rep.tp} TP / {rep.fp} FP / {rep.fn} FN boxes, "
                f"box precision {100.0 * rep.box_precision:.2f}%[/]"
            )

    def inventory_table(self, inventory: Sequence[LayerInfo]) -> Table:
        table = Table(title="Parameters", box=box.SIMPLE, header_style="bold bright_cyan")
        table.add_column("layer")
        table.add_column("shape", justify="right")
        table.add_column("count", justify="right")
        for row in inventory:
            table.add_row(row["name"], "x".join(str(d) for d in row["shape"]), f"{row['count']:,}")
        total = sum(row["count"] for row in inventory)
        table.add_row("[bold]total[/]", "", f"[bold]{total:,}[/]")
        return table

    def show_inventory(self, inventory: Sequence[LayerInfo]) -> None:
        self.console.print(self.inventory_table(inventory))

    def show_dataset_summary(self, counts: Dict[str, Dict[str, int]], out_dir: str) -> None:
        """``counts`` maps split -> provenance -> number of images."""
        table = Table(box=box.SIMPLE, header_style="bold bright_cyan")
        provenances: List[str] = sorted({p for per_split in counts.values() for p in per_split})
        table.add_column("split", style="bold")
        for name in provenances:
            table.add_column(name, justify="right")
        table.add_column("total", justify="right")
        for split, per_split in counts.items():
            table.add_row(split, *(str(per_split.get(p, 0)) for p in provenances), str(sum(per_split.values())))
        self.console.print(Panel(table, title=f"[bold bright_yellow]Dataset[/] {out_dir}", border_style="bright_blue"))

    def show_training_summary(self, losses: Sequence[LossRecord], checkpoint: Optional[str]) -> None:
        if not losses:
            return
        first, last = losses[0], losses[-1]
        table = Table(show_header=False, box=None, padding=(0, 2))
        table.add_column(style="bold")
        table.add_column(justify="right")
        table.add_row("iterations", str(len(losses)))
        table.add_row("first total loss", f"{first['total']:.4f}")
        table.add_row("last total loss", f"{last['total']:.4f}")
        table.add_row("last hard / soft", f"{last['hard']:.4f} / {last['soft']:.4f}")
        if checkpoint:
            table.add_row("checkpoint", checkpoint)
        self.console.print(Panel(table, title="[bold bright_yellow]Training[/]", border_style="bright_blue"))

    @contextmanager
    def training_progress(self, total: int) -> Iterator:
        """Progress bar; yields the callback ``train`` expects."""
        progress = Progress(
            TextColumn("[bold bright_cyan]train"),
            BarColumn(bar_width=None),
            MofNCompleteColumn(),
            TextColumn("loss {task.fields[loss]}"),
            TimeElapsedColumn(),
            console=self.console,
            transient=True,
        )
        with progress:
            task = progress.add_task("train", total=total, loss="-")

            def update(iteration: int, record: LossRecord) -> None:
                progress.update(task, completed=iteration, loss=f"{record['total']:.4f}")

            yield update


def create_rich_display(console: Optional[Console] = None) -> RichDisplay:
    """Factory function to create a RichDisplay instance."""
    return RichDisplay(console)
