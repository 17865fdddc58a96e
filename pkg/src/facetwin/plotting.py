"""Report figures rendered with matplotlib's Agg backend.

Figures are saved with the software metadata stripped so re-running a
command reproduces the PNG byte for byte.
"""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_PNG_META = {"Software": None}


def _save(fig, path: str | Path) -> None:
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def plot_armse_curve(curves: Mapping[str, tuple[Sequence[float], Sequence[float], Sequence[float]]],
                     path: str | Path) -> None:
    """One line per method: ``name -> (radii, mean ARMSE, 1.96 SE half width)``."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, (radii, mean, half) in sorted(curves.items()):
        radii, mean, half = map(np.asarray, (radii, mean, half))
        ax.plot(radii, mean, marker="o", label=name)
        ax.fill_between(radii, mean - half, mean + half, alpha=0.25)
    ax.set_xlabel("crop radius d (mm)")
    ax.set_ylabel("ARMSE (mm)")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    _save(fig, path)


def plot_fit_diagnostics(diagnostics: Sequence[Mapping[str, float]], path: str | Path) -> None:
    """Per-iteration energy terms on a log axis."""
    it = [d["iteration"] for d in diagnostics]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for key in ("E_l", "E_c", "E_r", "E"):
        # exact zeros have no place on a log axis; leave gaps
        vals = [d[key] if d[key] > 0 else np.nan for d in diagnostics]
        ax.semilogy(it, vals, marker="o", label=key)
    ax.set_xlabel("outer iteration")
    ax.set_ylabel("energy")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    _save(fig, path)


def plot_error_histogram(distances: np.ndarray, path: str | Path, tolerance: float | None = None) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.hist(np.asarray(distances), bins=50, color="tab:blue")
    if tolerance is not None:
        ax.axvline(tolerance, color="tab:red", linestyle="--", label=f"{tolerance:g} mm")
        ax.legend()
    ax.set_xlabel("point-to-surface distance (mm)")
    ax.set_ylabel("vertices")
    fig.tight_layout()
    _save(fig, path)
