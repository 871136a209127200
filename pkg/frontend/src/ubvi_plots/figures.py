"""Figure rendering from experiment trace/summary CSVs and mixture JSON.

Four figure kinds are supported: 1-D density overlays, log-density tail
views, and divergence curves against component count or CPU time with
median lines and quartile bands.  Inputs are the runner's file formats
only; mixture densities are evaluated here from their JSON parameters.
Every density figure also writes a ``<output>.grid.csv`` sidecar with the
evaluated curve so rendering stays checkable without pixel comparisons.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

KINDS = ("density_overlay", "log_density", "divergence_vs_n", "divergence_vs_time")

DEFAULT_COLORS = {
    "ubvi": "tab:blue",
    "bvi": "tab:orange",
    "bvi-plus": "tab:green",
    "vi": "tab:red",
}


class SchemaError(ValueError):
    """An input file does not match the runner's declared format."""


@dataclass(frozen=True)
class FigureSpec:
    kind: str
    inputs: tuple[str, ...]
    output: str
    styling: dict = field(default_factory=dict)
    metric: str = "fwd_kl"
    grid_points: int = 2001

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"unknown figure kind {self.kind!r}")
        if not self.inputs:
            raise SchemaError("figure spec needs at least one input file")
        for path in self.inputs:
            if not os.path.exists(path):
                raise SchemaError(f"input file missing: {path}")

    @classmethod
    def from_json(cls, path: str) -> "FigureSpec":
        with open(path) as fh:
            raw = json.load(fh)
        known = {"kind", "inputs", "output", "styling", "metric", "grid_points"}
        extra = set(raw) - known
        if extra:
            raise SchemaError(f"unknown spec fields: {sorted(extra)}")
        raw["inputs"] = tuple(raw.get("inputs", ()))
        return cls(**raw)

    def color(self, method: str) -> str:
        return self.styling.get(method, DEFAULT_COLORS.get(method, "tab:gray"))


def read_csv(path: str) -> list[dict]:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows:
        raise SchemaError(f"empty CSV: {path}")
    header = rows[0]
    return [dict(zip(header, row)) for row in rows[1:]]


def require_columns(rows: list[dict], columns: list[str], path: str):
    missing = [c for c in columns if c not in rows[0]]
    if missing:
        raise SchemaError(f"{path}: missing columns {missing}")


def mixture_density(mixture: dict, x: np.ndarray) -> np.ndarray:
    """Evaluate a 1-D mixture JSON record on the grid x.

    ``sqrt`` mixtures square a weighted sum of root-Gaussian components;
    ``plain`` mixtures are ordinary weighted sums of Gaussian densities.
    """
    kind = mixture.get("kind", "sqrt")
    comps = mixture.get("components", [])
    weights = np.asarray(mixture.get("weights", []), dtype=float)
    if len(comps) != weights.shape[0] or not comps:
        raise SchemaError("mixture JSON needs matching components and weights")
    means = np.array([c["mean"] for c in comps], dtype=float)
    log_vars = np.array([c["log_var"] for c in comps], dtype=float)
    if means.shape[1] != 1:
        raise SchemaError("density figures support 1-D mixtures only")
    sd = np.exp(0.5 * log_vars[:, 0])
    z = (x[:, None] - means[:, 0]) / sd
    npdf = np.exp(-0.5 * z**2) / (np.sqrt(2 * np.pi) * sd)
    if kind == "sqrt":
        root = np.sqrt(npdf) @ weights
        return root**2
    if kind == "plain":
        return npdf @ weights
    raise SchemaError(f"unknown mixture kind {kind!r}")


def _load_target_curve(paths):
    for path in paths:
        if path.endswith(".csv"):
            rows = read_csv(path)
            require_columns(rows, ["x", "density"], path)
            x = np.array([float(r["x"]) for r in rows])
            dens = np.array([float(r["density"]) for r in rows])
            return x, dens
    return None


def _load_mixtures(paths):
    out = []
    for path in paths:
        if path.endswith(".json"):
            with open(path) as fh:
                out.append((os.path.basename(path), json.load(fh)))
    return out


def _write_grid_csv(path, columns: dict[str, np.ndarray]):
    keys = list(columns)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(keys)
        for i in range(len(columns[keys[0]])):
            writer.writerow([repr(float(columns[k][i])) for k in keys])


def _density_figure(spec: FigureSpec, log_scale: bool) -> str:
    target = _load_target_curve(spec.inputs)
    mixtures = _load_mixtures(spec.inputs)
    if not mixtures and target is None:
        raise SchemaError("density figures need a mixture JSON or target CSV input")
    if target is not None:
        x = target[0]
    else:
        means = np.concatenate(
            [np.array([c["mean"][0] for c in m.get("components", [])])
             for _, m in mixtures]
        )
        sds = np.concatenate(
            [np.exp(0.5 * np.array([c["log_var"][0] for c in m.get("components", [])]))
             for _, m in mixtures]
        )
        lo = float((means - 6 * sds).min())
        hi = float((means + 6 * sds).max())
        x = np.linspace(lo, hi, spec.grid_points)

    fig, ax = plt.subplots(figsize=(6, 4))
    columns = {"x": x}
    if target is not None:
        curve = np.log(np.clip(target[1], 1e-300, None)) if log_scale else target[1]
        ax.plot(x, curve, color="black", lw=1.8, label="target")
        columns["target"] = curve
    for name, mixture in mixtures:
        dens = mixture_density(mixture, x)
        curve = np.log(np.clip(dens, 1e-300, None)) if log_scale else dens
        method = name.split("_")[1] if "_" in name else name
        ax.plot(x, curve, color=spec.color(method), lw=1.4, label=name)
        columns[name] = curve
    ax.set_xlabel("x")
    ax.set_ylabel("log density" if log_scale else "density")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(spec.output, dpi=150)
    plt.close(fig)
    _write_grid_csv(spec.output + ".grid.csv", columns)
    return spec.output


def _divergence_figure(spec: FigureSpec, x_axis: str) -> str:
    metric = spec.metric
    cols = [f"{metric}_median", f"{metric}_q25", f"{metric}_q75"]
    fig, ax = plt.subplots(figsize=(6, 4))
    for path in spec.inputs:
        rows = read_csv(path)
        require_columns(rows, ["method", "n"] + cols, path)
        if x_axis == "time":
            require_columns(rows, ["cpu_time_s_median"], path)
        by_method: dict[str, list[dict]] = {}
        for row in rows:
            if row.get(cols[0], "") == "":
                continue
            by_method.setdefault(row["method"], []).append(row)
        for method, grp in sorted(by_method.items()):
            grp = sorted(grp, key=lambda r: int(r["n"]))
            xs = (
                np.array([float(r["cpu_time_s_median"]) for r in grp])
                if x_axis == "time"
                else np.array([int(r["n"]) for r in grp])
            )
            med = np.array([float(r[cols[0]]) for r in grp])
            q25 = np.array([float(r[cols[1]]) for r in grp])
            q75 = np.array([float(r[cols[2]]) for r in grp])
            color = spec.color(method)
            ax.plot(xs, med, color=color, marker="o", ms=3, label=method)
            ax.fill_between(xs, q25, q75, color=color, alpha=0.2)
    ax.set_yscale("log")
    ax.set_xlabel("cpu time (s)" if x_axis == "time" else "components")
    ax.set_ylabel(metric)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(spec.output, dpi=150)
    plt.close(fig)
    return spec.output


def render(spec: FigureSpec) -> str:
    """Render one figure; returns the output path."""
    if spec.kind == "density_overlay":
        return _density_figure(spec, log_scale=False)
    if spec.kind == "log_density":
        return _density_figure(spec, log_scale=True)
    if spec.kind == "divergence_vs_n":
        return _divergence_figure(spec, x_axis="n")
    return _divergence_figure(spec, x_axis="time")
