"""Sinogram-domain evaluation of reconstruction methods.

A reconstruction is scored by reprojecting it at the measured angles and
computing the normalized mean squared error against the measured sinogram,
per energy channel:

    NMSE_e = ||P f - g||^2 / ||g||^2

``REFERENCE_NMSE`` lists published full-scale values for the four standard
methods as orientation for readers of reports; they are properties of a
physical scanner and full-size training run, not targets for the reduced
synthetic corpus.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ShapeError, UndefinedMetricError
from .projector import ENERGY_LABELS, Sinogram, Volume, forward_project

METHOD_ORDER = ("fbp", "mbir", "image_cnn", "dual_domain")

# Published sinogram-domain NMSE on the physical 9-view scanner (80kVp, 120kVp).
REFERENCE_NMSE = {
    "fbp": (16.647, 10.536),
    "mbir": (0.58247, 0.60440),
    "image_cnn": (0.33207, 0.32249),
    "dual_domain": (0.06845, 0.05450),
}


def nmse(estimate: Sinogram, reference: Sinogram) -> np.ndarray:
    """Per-energy normalized MSE between two sinograms on the same angles.

    Raises
    ------
    ShapeError
        On mismatched geometry, angles or shape.
    UndefinedMetricError
        If a reference channel has zero norm.
    """
    if estimate.geometry != reference.geometry:
        raise ShapeError("sinograms come from different geometries")
    if not np.array_equal(estimate.angles.indices, reference.angles.indices):
        raise ShapeError("sinograms cover different angle sets")
    if estimate.data.shape != reference.data.shape:
        raise ShapeError(
            f"sinogram shapes differ: {estimate.data.shape} vs {reference.data.shape}"
        )
    est = np.asarray(estimate.data, dtype=np.float64)
    ref = np.asarray(reference.data, dtype=np.float64)
    out = np.empty(2, dtype=np.float64)
    for e in range(2):
        denom = float(np.sum(ref[e] * ref[e]))
        if denom == 0.0:
            raise UndefinedMetricError(
                f"reference channel {ENERGY_LABELS[e]} has zero norm"
            )
        diff = est[e] - ref[e]
        out[e] = float(np.sum(diff * diff)) / denom
    return out


def evaluate_method(recon: Volume, measured: Sinogram, workers: int | None = None) -> np.ndarray:
    """Reproject a reconstruction at the measured angles and score it."""
    reproj = forward_project(recon, measured.geometry, measured.angles, workers)
    return nmse(reproj, measured)


@dataclass(frozen=True)
class MethodReport:
    """Per-case, per-method, per-energy NMSE table.

    ``failures`` maps "case/method" to an error string for cells that could
    not be evaluated (their values are NaN); ``provenance`` carries geometry
    digest and seeds.  Runtimes are deliberately not part of the report so a
    regenerated report compares equal to the live one.
    """

    case_names: tuple
    methods: tuple
    values: dict  # method -> ndarray (n_cases, 2)
    failures: dict = None
    provenance: dict = None

    def __post_init__(self):
        for m in self.methods:
            arr = np.asarray(self.values[m], dtype=np.float64)
            if arr.shape != (len(self.case_names), 2):
                raise ShapeError(
                    f"method {m!r} table has shape {arr.shape}, expected "
                    f"({len(self.case_names)}, 2)"
                )
            object.__getattribute__(self, "values")[m] = arr
        if self.failures is None:
            object.__setattr__(self, "failures", {})
        if self.provenance is None:
            object.__setattr__(self, "provenance", {})

    def mean(self, method: str) -> np.ndarray:
        return self.values[method].mean(axis=0)

    def strict_ordering_flags(self) -> list:
        """Per-case flag: dual_domain < image_cnn < mbir < fbp in both channels.

        Only meaningful when all four standard methods are present; otherwise
        every flag is None.
        """
        if any(m not in self.methods for m in METHOD_ORDER):
            return [None] * len(self.case_names)
        flags = []
        for i in range(len(self.case_names)):
            ok = True
            for e in range(2):
                chain = [self.values[m][i, e] for m in METHOD_ORDER]
                if not all(np.isfinite(chain)):
                    ok = False
                    break
                # METHOD_ORDER goes worst-case first, so NMSE must descend
                if not all(a > b for a, b in zip(chain, chain[1:])):
                    ok = False
                    break
            flags.append(ok)
        return flags

    def to_dict(self) -> dict:
        return {
            "energies": list(ENERGY_LABELS),
            "case_names": list(self.case_names),
            "methods": list(self.methods),
            "values": {m: [list(row) for row in self.values[m]] for m in self.methods},
            "failures": dict(self.failures),
            "provenance": dict(self.provenance),
            "strict_ordering_per_case": self.strict_ordering_flags(),
            "reference_full_scale": {m: list(v) for m, v in REFERENCE_NMSE.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MethodReport":
        return cls(
            tuple(d["case_names"]),
            tuple(d["methods"]),
            {m: np.asarray(d["values"][m], dtype=np.float64) for m in d["methods"]},
            dict(d.get("failures", {})),
            dict(d.get("provenance", {})),
        )


def compare_methods(
    case_names,
    measured,
    recons: dict,
    workers: int | None = None,
    provenance: dict | None = None,
) -> MethodReport:
    """Score several methods' reconstructions of the same measured cases.

    Parameters
    ----------
    case_names : sequence of str
    measured : sequence of Sinogram
    recons : dict
        Method name to list of Volumes, aligned with ``measured``.

    Every (case, method) cell is either populated or recorded in
    ``report.failures`` with the error message (value NaN).
    """
    names = tuple(case_names)
    if len(names) != len(measured):
        raise ShapeError("case_names and measured have different lengths")
    methods = tuple(recons)
    values = {}
    failures = {}
    for m in methods:
        vols = recons[m]
        if len(vols) != len(names):
            raise ShapeError(f"method {m!r} has {len(vols)} volumes for {len(names)} cases")
        table = np.full((len(names), 2), np.nan, dtype=np.float64)
        for i, (vol, meas) in enumerate(zip(vols, measured)):
            try:
                table[i] = evaluate_method(vol, meas, workers)
            except Exception as exc:  # noqa: BLE001 - cell-level fault isolation
                failures[f"{names[i]}/{m}"] = str(exc)
        values[m] = table
    return MethodReport(names, methods, values, failures, provenance or {})


# -- report files ----------------------------------------------------------------


def write_report(report: MethodReport, outdir) -> dict:
    """Write the delimited table and the machine-readable variant.

    Returns a dict of written paths keyed by artifact name.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    csv_path = outdir / "report.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case", "method", "energy", "nmse"])
        for i, case in enumerate(report.case_names):
            for m in report.methods:
                for e, label in enumerate(ENERGY_LABELS):
                    writer.writerow([case, m, label, repr(float(report.values[m][i, e]))])
        for m in report.methods:
            mean = report.mean(m)
            for e, label in enumerate(ENERGY_LABELS):
                writer.writerow(["MEAN", m, label, repr(float(mean[e]))])
    json_path = outdir / "report.json"
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return {"csv": csv_path, "json": json_path}


def load_report(path) -> MethodReport:
    with open(path, "r", encoding="utf-8") as fh:
        return MethodReport.from_dict(json.load(fh))


def format_report_table(report: MethodReport) -> str:
    """Human-readable mean NMSE table (also printed by the CLI)."""
    lines = ["mean sinogram-domain NMSE over %d cases" % len(report.case_names)]
    header = f"{'method':<12}" + "".join(f"{lab:>12}" for lab in ENERGY_LABELS)
    lines.append(header)
    lines.append("-" * len(header))
    for m in report.methods:
        mean = report.mean(m)
        lines.append(f"{m:<12}" + "".join(f"{v:>12.5f}" for v in mean))
    return "\n".join(lines)


def render_report_figures(report: MethodReport, outdir) -> list:
    """Render summary figures next to the delimited output; returns paths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = []

    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    xs = np.arange(len(report.methods))
    width = 0.38
    for e, label in enumerate(ENERGY_LABELS):
        vals = [report.mean(m)[e] for m in report.methods]
        ax.bar(xs + (e - 0.5) * width, vals, width, label=label)
    ax.set_xticks(xs)
    ax.set_xticklabels(report.methods)
    ax.set_yscale("log")
    ax.set_ylabel("mean sinogram NMSE")
    ax.set_title("method comparison")
    ax.legend()
    fig.tight_layout()
    p = outdir / "mean_nmse.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    paths.append(p)

    fig, axes = plt.subplots(1, 2, figsize=(9.6, 4.2), sharey=True)
    for e, (ax, label) in enumerate(zip(axes, ENERGY_LABELS)):
        for m in report.methods:
            ax.plot(report.values[m][:, e], marker="o", label=m)
        ax.set_yscale("log")
        ax.set_title(label)
        ax.set_xlabel("case")
    axes[0].set_ylabel("sinogram NMSE")
    axes[0].legend()
    fig.tight_layout()
    p = outdir / "per_case_nmse.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    paths.append(p)
    return paths
