"""File and output helpers: output layout, result tables and reports.

Tables are written as CSV (default) or as a JSON mirror. Both start with
the same run header (version, command, seed, flags) and both parse back
into equal values through ``read_table``.
"""

import csv
import io
import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

from jinja2 import Environment, FileSystemLoader, StrictUndefined

from nlclab import __version__
from nlclab.errors import OutputError, ValidationFailure


TEMPLATES_DIR = Path(__file__).resolve().parent.parent / "templates"
FORMATS = ("csv", "json")


@lru_cache(maxsize=1)
def template_env() -> Environment:
    return Environment(
        loader=FileSystemLoader(str(TEMPLATES_DIR)),
        undefined=StrictUndefined,
        keep_trailing_newline=True,
        trim_blocks=True,
        lstrip_blocks=True,
    )


def ensure_output_dirs(base_dir: Path) -> Dict[str, Path]:
    """Ensure the standard output layout exists and return paths.

    Structure:
    - base_dir/
      - tables/
      - reports/
    """

    tables_dir = base_dir / "tables"
    reports_dir = base_dir / "reports"
    try:
        tables_dir.mkdir(parents=True, exist_ok=True)
        reports_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OutputError(f"cannot create output directories under {base_dir}: {exc}") from exc
    return {"root": base_dir, "tables": tables_dir, "reports": reports_dir}


@dataclass(frozen=True)
class RunHeader:
    command: str
    seed: int
    flags: Tuple[Tuple[str, str], ...]
    extra: Tuple[Tuple[str, str], ...] = ()
    version: str = __version__

    @classmethod
    def build(
        cls, command: str, seed: int, flags: Dict[str, Any], extra: Optional[Dict[str, Any]] = None
    ) -> "RunHeader":
        return cls(
            command,
            int(seed),
            tuple(sorted((k, str(v)) for k, v in flags.items())),
            tuple((k, str(v)) for k, v in (extra or {}).items()),
        )

    def flag_string(self) -> str:
        return " ".join(f"{k}={v}" for k, v in self.flags)

    def render(self) -> List[str]:
        text = template_env().get_template("header.txt.j2").render(
            version=self.version,
            command=self.command,
            seed=self.seed,
            flags=self.flag_string(),
            extra=self.extra,
        )
        return [line for line in text.splitlines() if line]

    def as_dict(self) -> Dict[str, str]:
        meta = {}
        for line in self.render()[1:]:
            key, _, value = line.partition(": ")
            meta[key] = value
        return meta


@dataclass(frozen=True)
class Table:
    meta: Dict[str, str]
    columns: Tuple[str, ...]
    rows: Tuple[Tuple[Any, ...], ...]


def _cell(value: Any) -> str:
    if isinstance(value, bool):
        raise ValidationFailure("boolean cells are not supported")
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def _parse_cell(text: str) -> Any:
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def render_table(
    header: RunHeader,
    columns: Sequence[str],
    rows: Iterable[Sequence[Any]],
    fmt: str = "csv",
) -> str:
    if fmt not in FORMATS:
        raise ValidationFailure(f"format must be one of {FORMATS}, got {fmt!r}")
    rows = [tuple(r) for r in rows]
    for r in rows:
        if len(r) != len(columns):
            raise ValidationFailure(f"row has {len(r)} cells, expected {len(columns)}")
    if fmt == "json":
        payload = {
            "meta": {"nlclab": header.version, **header.as_dict()},
            "columns": list(columns),
            "rows": [[_plain(v) for v in r] for r in rows],
        }
        return json.dumps(payload, indent=2) + "\n"

    buffer = io.StringIO()
    for line in header.render():
        buffer.write(f"# {line}\n")
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(columns)
    for r in rows:
        writer.writerow([_cell(v) for v in r])
    return buffer.getvalue()


def _plain(value: Any) -> Any:
    if hasattr(value, "item"):
        return value.item()
    return value


def write_table(
    path: Path,
    header: RunHeader,
    columns: Sequence[str],
    rows: Iterable[Sequence[Any]],
    fmt: str = "csv",
) -> Path:
    """Write a result table; parent directories are created as needed."""

    text = render_table(header, columns, rows, fmt)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from exc
    return path


def read_table(path: Path) -> Table:
    """Parse a table written by ``write_table`` (CSV or JSON)."""

    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OutputError(f"cannot read {path}: {exc}") from exc

    if text.lstrip().startswith("{"):
        payload = json.loads(text)
        meta = {k: v for k, v in payload["meta"].items() if k != "nlclab"}
        meta["version"] = payload["meta"]["nlclab"]
        rows = tuple(tuple(r) for r in payload["rows"])
        return Table(meta, tuple(payload["columns"]), rows)

    lines = text.splitlines()
    comments = [line[2:] for line in lines if line.startswith("# ")]
    body = [line for line in lines if not line.startswith("#")]
    meta = {"version": comments[0].split(" ", 1)[1]} if comments else {}
    for line in comments[1:]:
        key, _, value = line.partition(": ")
        meta[key] = value
    reader = csv.reader(body)
    columns = tuple(next(reader))
    rows = tuple(tuple(_parse_cell(cell) for cell in r) for r in reader)
    return Table(meta, columns, rows)


def write_markdown_doc(reports_dir: Path, name: str, content: str) -> Path:
    """Write a markdown document under the reports directory."""

    target = reports_dir / name
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(content, encoding="utf-8")
    except OSError as exc:
        raise OutputError(f"cannot write {target}: {exc}") from exc
    return target


def render_report(**context: Any) -> str:
    return template_env().get_template("report.md.j2").render(version=__version__, **context)
