#!/usr/bin/env python3
"""
WAE-RNF - Plots
MI bar chart from a metrics CSV and the 2-D curvature heatmap (sqrt det G)
with an optional geodesic overlay. Every figure is written as SVG next to a
CSV of the plotted values.
"""

import logging
import os
from typing import Dict, Optional, Sequence

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from flows import FlowStack
from geometry import Curve, curvature_grid

logger = logging.getLogger('plots')


def final_mi_by_model(metrics: pd.DataFrame, split: str = 'dev') -> pd.DataFrame:
    """Last-epoch MI (and its standard error) per model on ``split``."""
    rows = metrics[metrics['split'] == split]
    if rows.empty:
        rows = metrics
    last = rows.sort_values('epoch').groupby('model', sort=True).tail(1)
    return last[['model', 'epoch', 'mi', 'mi_se']].reset_index(drop=True)


def mi_bar_chart(metrics_csv: str, out_svg: str, split: str = 'dev') -> pd.DataFrame:
    """One bar per model: mutual information stored in the latent codes."""
    table = final_mi_by_model(pd.read_csv(metrics_csv), split)
    fig, ax = plt.subplots(figsize=(max(4, 1.5 * len(table)), 4))
    ax.bar(table['model'], table['mi'], yerr=table['mi_se'].fillna(0.0), capsize=4, color='steelblue')
    ax.set_ylabel('I(z; x) [nats]')
    ax.set_title(f'Mutual information ({split})')
    fig.tight_layout()
    fig.savefig(out_svg, format='svg')
    plt.close(fig)
    table.to_csv(os.path.splitext(out_svg)[0] + '.csv', index=False)
    logger.info(f"📈 MI chart for {len(table)} models saved to {out_svg}")
    return table


def curvature_heatmap(stack: FlowStack, out_svg: str, lo: float = -3.0, hi: float = 3.0, n: int = 100,
                      curves: Optional[Dict[str, Curve]] = None) -> Optional[np.ndarray]:
    """
    Heatmap of sqrt det G over [lo, hi]², brighter meaning more curvature.

    Returns the grid values, or None (with a notice) when the latent space is not 2-D.
    """
    if stack.dim is not None and stack.dim != 2:
        logger.warning(f"⚠️  Skipping curvature heatmap: latent dimension is {stack.dim}, not 2")
        return None
    xs, ys, values = curvature_grid(stack, lo, hi, n)
    gx, gy = np.meshgrid(xs, ys)
    pd.DataFrame({'x': gx.ravel(), 'y': gy.ravel(), 'sqrt_det_g': values.ravel()}).to_csv(
        os.path.splitext(out_svg)[0] + '.csv', index=False)

    fig, ax = plt.subplots(figsize=(6, 5))
    mesh = ax.pcolormesh(xs, ys, values, shading='auto', cmap='magma')
    fig.colorbar(mesh, ax=ax, label='sqrt det G')
    for label, curve in (curves or {}).items():
        ax.plot(curve.points[:, 0], curve.points[:, 1], label=label, linewidth=1.5)
    if curves:
        ax.legend(loc='upper right')
    ax.set_xlim(lo, hi)
    ax.set_ylim(lo, hi)
    ax.set_aspect('equal')
    fig.tight_layout()
    fig.savefig(out_svg, format='svg')
    plt.close(fig)
    logger.info(f"🗺️  Curvature heatmap saved to {out_svg}")
    return values


def write_curve_csv(path: str, curve: Curve) -> None:
    columns = {f"z{j}": curve.points[:, j] for j in range(curve.points.shape[1])}
    frame = pd.DataFrame({'i': np.arange(curve.N + 1), **columns})
    frame.to_csv(path, index=False)


def energy_trace_csv(path: str, traces: Dict[str, Sequence[float]]) -> None:
    rows = [{'curve': name, 'iteration': i, 'energy': e}
            for name, trace in traces.items() for i, e in enumerate(trace)]
    pd.DataFrame(rows, columns=['curve', 'iteration', 'energy']).to_csv(path, index=False)
