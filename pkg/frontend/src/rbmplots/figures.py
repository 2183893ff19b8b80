"""The four figure kinds, each returning a sidecar of the plotted arrays.

Figures are deliberately computation-free: regression lines for the tail
fit are the only derived series, and their coefficients go into the sidecar
so an offline oracle can re-check them.  Statistical verdicts (KS
distances, z-scores) are read from the manifest, never recomputed.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .results import ResultTable, load_results, validate

KINDS = ("collapse", "edge_hist", "tail_fit", "table_check")


class RenderError(RuntimeError):
    """Schema violation or missing data; nothing is written."""


@dataclass(frozen=True)
class FigureSpec:
    in_dir: Path
    kind: str
    out_path: Path
    style: dict = field(default_factory=dict)


def _fit_line(x: np.ndarray, y: np.ndarray, exponent: float) -> dict:
    """Least squares of y against -x**exponent; slope, intercept, R^2."""
    t = -(x**exponent)
    design = np.column_stack([np.ones_like(t), t])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 0.0
    return {
        "exponent": exponent,
        "intercept": float(coef[0]),
        "slope": float(coef[1]),
        "r2": r2,
    }


def _single(table: ResultTable, quantity: str) -> float:
    vals = table.series(quantity)
    if len(vals) != 1:
        raise RenderError(f"expected exactly one {quantity} row, found {len(vals)}")
    return vals[0]


def _build_collapse(table: ResultTable, ax) -> dict:
    idx = sorted(
        {int(m.group(1)) for q in table.quantities() if (m := re.match(r"collapse\.lat(\d+)\.tau$", q))}
    )
    if not idx:
        raise RenderError("no collapse.lat*.tau rows; is this a critical_scan result?")
    series: dict[str, dict] = {}
    for i in idx:
        tau = table.series(f"collapse.lat{i}.tau")
        y = table.series(f"collapse.lat{i}.y")
        ywin = table.series(f"collapse.lat{i}.ywin")
        if not tau or len(tau) != len(y) or len(tau) != len(ywin):
            raise RenderError(f"collapse.lat{i} series are empty or ragged")
        L = _single(table, f"collapse.lat{i}.L")
        W = _single(table, f"collapse.lat{i}.W")
        label = f"L={L:g}, W={W:g}"
        ax.plot(tau, y, "o", label=f"exact, {label}")
        ax.plot(tau, ywin, "-", alpha=0.7, label=f"window, {label}")
        series[f"lat{i}"] = {"tau": tau, "y": y, "ywin": ywin, "L": L, "W": W}
    ax.set_xlabel(r"$\tau = n\,(W/L)^2$")
    ax.set_ylabel("cluster sum / reference")
    ax.set_title("scaling collapse across lattices")
    ax.legend(fontsize=8)
    return {"series": series}


def _build_edge_hist(table: ResultTable, ax) -> dict:
    betas = sorted(
        {int(m.group(1)) for q in table.quantities() if (m := re.match(r"edge\.beta(\d)\.rbm$", q))}
    )
    if not betas:
        raise RenderError(
            "no per-sample edge rows; run edge_universality with edge.emit_samples = 1"
        )
    series: dict[str, dict] = {}
    for beta in betas:
        rbm = table.series(f"edge.beta{beta}.rbm")
        base = table.series(f"edge.beta{beta}.base")
        if not rbm or not base:
            raise RenderError(f"edge.beta{beta} sample rows are empty")
        both = np.concatenate([rbm, base])
        bins = np.linspace(float(both.min()), float(both.max()), 41)
        ax.hist(rbm, bins=bins, density=True, alpha=0.45, label=f"band, beta={beta}")
        ax.hist(
            base, bins=bins, density=True, histtype="step", lw=1.5,
            label=f"baseline, beta={beta}",
        )
        comp = table.comparison(f"edge.beta{beta}.ks")
        ks = comp["measurement"] if comp else None
        if ks is not None:
            ax.annotate(
                f"KS = {ks:.3f} ({comp['classification']})",
                xy=(0.02, 0.95 - 0.08 * (beta - 1)), xycoords="axes fraction", fontsize=8,
            )
        series[f"beta{beta}"] = {"rbm": rbm, "base": base, "bins": bins.tolist(), "ks": ks}
    ax.set_xlabel("rescaled largest eigenvalue")
    ax.set_ylabel("density")
    ax.set_title("edge law vs invariant baseline")
    ax.legend(fontsize=8)
    return {"series": series}


def _build_tail_fit(table: ResultTable, ax) -> dict:
    xs = np.array(table.series("tail.x"))
    logp = np.array(table.series("tail.logp"))
    if xs.size < 3 or xs.size != logp.size:
        raise RenderError("need at least three tail.x/tail.logp pairs for a fit")
    d = int(table.config.get("lattice", {}).get("d", 1))
    fits = {
        "sub": _fit_line(xs, logp, (6.0 - d) / 4.0),
        "super": _fit_line(xs, logp, 1.5),
    }
    curve_x = np.linspace(float(xs.min()), float(xs.max()), 100)
    curves: dict[str, list] = {"x": curve_x.tolist()}
    ax.plot(xs, logp, "ko", label="measured log survival")
    for label, fit in fits.items():
        cy = fit["intercept"] - fit["slope"] * curve_x ** fit["exponent"]
        ax.plot(curve_x, cy, label=f"{label}: x^{fit['exponent']:g}, R2={fit['r2']:.3f}")
        curves[label] = cy.tolist()
    ax.set_xlabel("x")
    ax.set_ylabel("log P(rescaled max >= x)")
    ax.set_title("tail decay against both candidate exponents")
    ax.legend(fontsize=8)
    return {"series": {"x": xs.tolist(), "logp": logp.tolist()}, "fit": fits, "curves": curves}


def _build_table_check(table: ResultTable, ax) -> dict:
    table1: dict[str, list] = {}
    table2: dict[str, list] = {}
    scan: dict[str, dict] = {}
    values = {}
    for row in table.rows:
        values.setdefault(row.quantity, row.value)
    for q, v in values.items():
        m = re.match(r"table1\.d(\d+)\.pair(\d+)\.v2$", q)
        if m:
            d, k = m.groups()
            v3 = values[f"table1.d{d}.pair{k}.v3"]
            table1.setdefault(f"d{d}", []).append([int(v), int(v3)])
        m = re.match(r"table2\.d(\d+)\.pattern(\d+)\.(tadpole|v2)$", q)
        if m:
            d, k, what = m.groups()
            entry = "tadpole" if what == "tadpole" else [int(v), int(values[f"table2.d{d}.pattern{k}.v3"])]
            table2.setdefault(f"d{d}", []).append(entry)
        m = re.match(r"scan\.(\w+)\.d(\d+)\.divergent$", q)
        if m:
            name, d = m.groups()
            wit = None
            if f"scan.{name}.d{d}.witness_v2" in values:
                wit = [
                    int(values[f"scan.{name}.d{d}.witness_v2"]),
                    int(values[f"scan.{name}.d{d}.witness_v3"]),
                ]
            scan[f"{name}.d{d}"] = {"divergent": v, "witness": wit}
    if not table1:
        raise RenderError("no table1.* rows; is this a diagram_tables result?")
    dims = sorted(table1, key=lambda s: int(s[1:]))
    pairs = sorted({tuple(p) for rows in table1.values() for p in rows})
    cells = [[1 if list(p) in table1[dim] else 0 for p in pairs] for dim in dims]
    ax.imshow(cells, cmap="Blues", vmin=0, vmax=1, aspect="auto")
    ax.set_xticks(range(len(pairs)), [f"({a},{b})" for a, b in pairs], fontsize=8)
    ax.set_yticks(range(len(dims)), dims)
    ax.set_xlabel("(2-valent, 3-valent) singular profile")
    ax.set_title("singular-profile membership with divergence witnesses")
    for key, rec in sorted(scan.items()):
        if rec["witness"] is None:
            continue
        dim_key = "d" + key.split(".d")[1]
        if dim_key in dims and tuple(rec["witness"]) in pairs:
            ax.plot(pairs.index(tuple(rec["witness"])), dims.index(dim_key), "rx", ms=12, mew=2)
            ax.annotate(key, (pairs.index(tuple(rec["witness"])), dims.index(dim_key)),
                        textcoords="offset points", xytext=(6, 6), fontsize=7, color="red")
    return {
        "table1": table1,
        "table2": table2,
        "scan": scan,
        "matrix": {"dims": dims, "pairs": [list(p) for p in pairs], "cells": cells},
    }


_BUILDERS = {
    "collapse": _build_collapse,
    "edge_hist": _build_edge_hist,
    "tail_fit": _build_tail_fit,
    "table_check": _build_table_check,
}


def render(spec: FigureSpec) -> dict:
    """Render one figure; returns the sidecar payload after writing both files."""
    if spec.kind not in _BUILDERS:
        raise RenderError(f"unknown figure kind {spec.kind!r}; valid kinds: {', '.join(KINDS)}")
    report = validate(spec.in_dir)
    if not report.ok:
        raise RenderError("input fails schema validation: " + "; ".join(report.failures))
    table = load_results(spec.in_dir)
    fig, ax = plt.subplots(figsize=spec.style.get("figsize", (6.0, 4.0)))
    try:
        payload = _BUILDERS[spec.kind](table, ax)
    except RenderError:
        plt.close(fig)
        raise
    payload = {
        "kind": spec.kind,
        "recipe": table.manifest["recipe"],
        "params_hash": table.params_hash,
        **payload,
    }
    out_path = Path(spec.out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(out_path, dpi=spec.style.get("dpi", 150))
    plt.close(fig)
    sidecar = out_path.with_suffix(".json")
    sidecar.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    return payload
