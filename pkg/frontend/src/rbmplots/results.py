"""Reading and schema-checking recipe output directories.

The contract mirrored here: result.csv is long format with the header
quantity,value,stderr,n,params_hash; every row carries the same params
hash; repeated quantities form a series ordered as written, indexed by n.
manifest.json carries the config echo, the seed, and the comparison list.
Validation never raises; the report carries the failures.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

CSV_HEADER = "quantity,value,stderr,n,params_hash"

_MANIFEST_KEYS = ("recipe", "config", "params_hash", "seed", "comparisons", "status")

# quantity-name prefixes each recipe is known to emit; anything else in a
# recognized recipe's CSV is only worth a warning
_EXPECTED_PREFIXES = {
    "constants": ("const.",),
    "critical_scan": ("collapse.",),
    "diagram_tables": ("table1.", "table2.", "scan.", "diagrams."),
    "edge_universality": ("edge.",),
    "factorization": ("fact.",),
    "heat_kernel": ("heat.",),
    "identity_suite": ("identity.",),
    "llt_check": ("llt.",),
    "moment_reduction": ("moment.",),
    "tadpole_demo": ("tad.",),
    "tail_decay": ("tail.",),
}


@dataclass
class SchemaReport:
    """Machine-readable validation outcome; ok means no failures."""

    failures: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def as_dict(self) -> dict:
        return {"ok": self.ok, "failures": self.failures, "warnings": self.warnings}


@dataclass
class Row:
    quantity: str
    value: float
    stderr: float
    n: int


@dataclass
class ResultTable:
    """One run directory: parsed rows plus the manifest."""

    rows: list[Row]
    manifest: dict
    params_hash: str

    def series(self, quantity: str) -> list[float]:
        return [r.value for r in self.rows if r.quantity == quantity]

    def errors(self, quantity: str) -> list[float]:
        return [r.stderr for r in self.rows if r.quantity == quantity]

    def quantities(self) -> list[str]:
        seen = dict.fromkeys(r.quantity for r in self.rows)
        return list(seen)

    def comparison(self, name: str) -> dict | None:
        for c in self.manifest.get("comparisons", ()):
            if c.get("name") == name:
                return c
        return None

    @property
    def config(self) -> dict:
        return self.manifest.get("config", {})


def validate(result_dir: str | Path) -> SchemaReport:
    """Check one run directory against the output contract."""
    result_dir = Path(result_dir)
    report = SchemaReport()
    csv_path = result_dir / "result.csv"
    man_path = result_dir / "manifest.json"
    if not csv_path.is_file():
        report.failures.append("missing-result-csv")
    if not man_path.is_file():
        report.failures.append("missing-manifest")
    manifest = None
    if man_path.is_file():
        try:
            manifest = json.loads(man_path.read_text())
        except (json.JSONDecodeError, OSError) as exc:
            report.failures.append(f"bad-manifest-json: {exc}")
    if manifest is not None:
        for key in _MANIFEST_KEYS:
            if key not in manifest:
                report.failures.append(f"manifest-missing-key: {key}")
    if not csv_path.is_file():
        return report

    lines = csv_path.read_text().splitlines()
    if not lines or lines[0] != CSV_HEADER:
        got = lines[0] if lines else ""
        report.failures.append(f"csv-columns: header {got!r} != {CSV_HEADER!r}")
        return report
    hashes = set()
    recipe = manifest.get("recipe") if isinstance(manifest, dict) else None
    prefixes = _EXPECTED_PREFIXES.get(recipe)
    if recipe is not None and prefixes is None:
        report.warnings.append(f"unknown-recipe: {recipe!r}")
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 5:
            report.failures.append(f"csv-field-count: line {lineno} has {len(parts)} fields")
            continue
        quantity, value, stderr, n, params_hash = parts
        try:
            float(value)
            float(stderr)
        except ValueError:
            report.failures.append(f"csv-value: line {lineno} is not numeric")
        try:
            int(n)
        except ValueError:
            report.failures.append(f"csv-n: line {lineno} index is not an integer")
        hashes.add(params_hash)
        if (
            prefixes is not None
            and quantity != "__truncated__"
            and not quantity.startswith(prefixes)
        ):
            report.warnings.append(f"unknown-quantity: {quantity}")
    if len(hashes) > 1:
        report.failures.append(f"params-hash-mixed: {sorted(hashes)}")
    if isinstance(manifest, dict) and "params_hash" in manifest and hashes:
        if manifest["params_hash"] not in hashes:
            report.failures.append("params-hash-mismatch: csv and manifest disagree")
    return report


def load_results(result_dir: str | Path) -> ResultTable:
    """Parse a validated run directory; raises ValueError on schema failures."""
    report = validate(result_dir)
    if not report.ok:
        raise ValueError("; ".join(report.failures))
    result_dir = Path(result_dir)
    manifest = json.loads((result_dir / "manifest.json").read_text())
    rows = []
    for line in (result_dir / "result.csv").read_text().splitlines()[1:]:
        quantity, value, stderr, n, _ = line.split(",")
        rows.append(Row(quantity, float(value), float(stderr), int(n)))
    return ResultTable(rows, manifest, manifest["params_hash"])
