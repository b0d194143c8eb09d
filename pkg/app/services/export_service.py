"""
Plot-data export.

Turns the artifacts of a pipeline run into flat CSV files under
``<dir>/plots`` and lists them in ``plots/manifest.json``. Artifact groups
that are absent are reported as missing; the rest are still exported.
"""
import json
import shutil
from pathlib import Path
from typing import Dict, List, Union

from loguru import logger

from app.schemas.reports import ExportManifest

PLOTS_DIR = "plots"
MANIFEST = "manifest.json"
FEASIBLE_STATUSES = ("converged", "feasible")


def _copy(src: Path, dst: Path) -> None:
    shutil.copyfile(src, dst)


def _library_costs(manifest_path: Path, dst: Path) -> None:
    data = json.loads(manifest_path.read_text())
    rows = []
    width = 0
    for e in data["entries"]:
        point = list(e["point"])
        target = list(e.get("target") or [])
        width = max(width, len(point))
        rows.append((e["index"], point, target, e["status"], e["cost"]))
    n_target = max([len(r[2]) for r in rows] + [0])
    header = ["index"] + [f"x{i}" for i in range(width)] + [f"target_{i}" for i in range(n_target)] + ["feasible", "cost"]
    lines = [",".join(header)]
    for index, point, target, status, cost in rows:
        cells = [str(index)] + [f"{v:.12g}" for v in point] + [f"{v:.12g}" for v in target]
        cells += [str(int(status in FEASIBLE_STATUSES)), f"{float(cost):.12g}"]
        lines.append(",".join(cells))
    dst.write_text("\n".join(lines) + "\n")


def _glob_group(base: Path, pattern: str, prefix: str, describe: str, files: Dict[str, str], out: Path) -> bool:
    """Copy files matching pattern; a wildcard part of the name is appended to prefix."""
    found = False
    suffix = pattern.split("*", 1)[-1]
    for src in sorted(base.glob(pattern)):
        name = src.name[: -len(suffix)] if "*" in pattern else ""
        target = f"{prefix}{name}.csv"
        _copy(src, out / target)
        files[target] = describe
        found = True
    return found


def export_plots(directory: Union[str, Path]) -> ExportManifest:
    """Export the plot data of a run directory.

    An empty or non-pipeline directory gives an empty manifest and a warning.
    """
    base = Path(directory)
    out = base / PLOTS_DIR
    files: Dict[str, str] = {}
    missing: List[str] = []
    has_run = (base / "config.json").exists() or (base / "summary.json").exists()
    if not has_run:
        logger.warning(f"{base} holds no pipeline artifacts; nothing to export")
        manifest = ExportManifest()
        if base.is_dir():
            out.mkdir(exist_ok=True)
            (out / MANIFEST).write_text(manifest.model_dump_json(indent=2))
        return manifest
    out.mkdir(parents=True, exist_ok=True)

    library_manifest = base / "optimize" / "library" / "manifest.json"
    if library_manifest.exists():
        _library_costs(library_manifest, out / "library_costs.csv")
        files["library_costs.csv"] = "index, grid point x_i, target parameters, feasible flag, cost"
    else:
        missing.append("optimize/library")

    groups = [
        ("library", "injectivity.csv", "singular_values", "t, singular values sigma_i of the x1 features"),
        ("verify", "poincare.csv", "poincare_moduli", "section, converged, residual, max modulus, moduli"),
        ("simulate", "*_lyapunov.csv", "lyapunov_", "t = k T_p, V, bound c^k V_0"),
        ("simulate", "*_output.csv", "output_", "t, |y(t)|"),
        ("simulate", "*_speeds.csv", "speeds_", "step, average speed"),
        ("simulate", "*_targets.csv", "targets_", "t, active target parameters"),
    ]
    for stage, pattern, prefix, describe in groups:
        if not _glob_group(base / stage, pattern, prefix, describe, files, out):
            missing.append(f"{stage}/{pattern}")

    traces = [p for p in sorted((base / "simulate").glob("*.csv"))
              if not p.name.endswith(("_lyapunov.csv", "_output.csv", "_speeds.csv", "_targets.csv"))]
    for src in traces:
        target = f"trace_{src.stem}.csv"
        _copy(src, out / target)
        files[target] = "t, state columns x_i, input columns u_j (hybrid traces add a phase column)"
    if not traces:
        missing.append("simulate/<scenario>.csv")

    manifest = ExportManifest(files=dict(sorted(files.items())), missing=missing)
    (out / MANIFEST).write_text(manifest.model_dump_json(indent=2))
    for item in missing:
        logger.warning(f"artifact {item} not found; skipped")
    logger.info(f"Exported {len(files)} plot files to {out}")
    return manifest
