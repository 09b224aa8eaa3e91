"""Render paper-style figures from the gsntk experiment CSV outputs.

This package is read-only over the documented CSV schemas: it never recomputes
metrics, only plots the rows the experiment runners wrote.  Rendering is
deterministic — identical CSVs produce identical images (modulo raster encoder
metadata).

Usage::

    figplots --figure fig5 --in runs/rank-regimes/rank_regimes.csv --out fig5.png

Each figure id consumes a fixed ordered list of input CSVs:

=======  ==========================================  ==============================
figure   inputs (in --in order)                      content
=======  ==========================================  ==============================
fig3     core_alignment.csv, core_modes.csv          NTK/core alignment + spectra
fig4     selfref.csv                                 training curves and alignments
fig5     rank_regimes.csv                            effective ranks vs gain/rank
fig6     transformer_rank.csv, transformer_modes.csv attention rank sweeps
fig7     endpoints.csv, trajectories.csv             fixed-point PCA portraits
=======  ==========================================  ==============================
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

__version__ = "0.1.0"

FIGURE_INPUTS = {
    "fig3": ("core_alignment", "core_modes"),
    "fig4": ("selfref",),
    "fig5": ("rank_regimes",),
    "fig6": ("transformer_rank", "transformer_modes"),
    "fig7": ("endpoints", "trajectories"),
}

_SCHEMAS = {
    "core_alignment": ("seed", "checkpoint", "metric", "mode", "value"),
    "core_modes": ("seed", "checkpoint", "mode", "trial", "time", "value"),
    "selfref": ("seed", "network", "optimizer", "iteration", "metric", "mode",
                "value"),
    "rank_regimes": ("seed", "family", "gain", "input_rank", "view", "method",
                     "value", "censored"),
    "transformer_rank": ("seed", "sweep", "n_x", "n_in", "fourier", "width",
                         "metric", "value"),
    "transformer_modes": ("seed", "n_in", "mode", "trial", "time", "value"),
    "endpoints": ("seed", "gain", "planted", "start", "pc1", "pc2",
                  "cluster_count"),
    "trajectories": ("seed", "gain", "planted", "start", "step", "pc1", "pc2"),
}


class SchemaError(ValueError):
    """Raised when an input CSV does not match the documented schema."""


@dataclass(frozen=True)
class FigureSpec:
    """What to render: figure id, input CSV paths (in documented order),
    output image path, and styling options."""

    figure_id: str
    inputs: tuple
    out_path: Path
    dpi: int = 150
    title: str | None = None

    def __post_init__(self):
        if self.figure_id not in FIGURE_INPUTS:
            raise ValueError(f"unknown figure id {self.figure_id!r} "
                             f"(known: {sorted(FIGURE_INPUTS)})")
        expected = FIGURE_INPUTS[self.figure_id]
        if len(self.inputs) != len(expected):
            raise ValueError(
                f"{self.figure_id} needs {len(expected)} input CSV(s) "
                f"({', '.join(n + '.csv' for n in expected)}); "
                f"got {len(self.inputs)}")


@dataclass
class Table:
    """A parsed CSV: column-name -> list of raw strings, plus typed access."""

    columns: tuple
    cells: dict = field(default_factory=dict)

    def floats(self, name: str) -> np.ndarray:
        return np.array([float(v) if v != "" else np.nan
                         for v in self.cells[name]])

    def strings(self, name: str) -> np.ndarray:
        return np.array(self.cells[name], dtype=object)

    def mask(self, **conditions) -> np.ndarray:
        m = np.ones(len(self.cells[self.columns[0]]), dtype=bool)
        for name, want in conditions.items():
            col = self.cells[name]
            m &= np.array([v == str(want) for v in col])
        return m


def read_table(path, schema_name: str) -> Table:
    expected = _SCHEMAS[schema_name]
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = tuple(next(reader))
        except StopIteration:
            raise SchemaError(f"{path}: empty file (expected header "
                              f"{','.join(expected)})") from None
        if header != expected:
            missing = [c for c in expected if c not in header]
            unexpected = [c for c in header if c not in expected]
            raise SchemaError(
                f"{path}: column mismatch for {schema_name}.csv — "
                f"missing {missing or 'none'}, unexpected {unexpected or 'none'}, "
                f"expected order {list(expected)}, got {list(header)}")
        rows = list(reader)
    cells = {c: [row[i] for row in rows] for i, c in enumerate(expected)}
    return Table(columns=expected, cells=cells)


# ------------------------------------------------------------------- rendering

def _seed_values(table: Table, column: str = "seed") -> list:
    return sorted(set(table.cells[column]), key=lambda s: int(s))


def _render_fig3(tables, axes):
    ca, modes = tables
    seed = _seed_values(ca)[0]
    ckpts = sorted({int(c) for c in ca.cells["checkpoint"]})

    ax = axes[0, 0]
    sel = ca.mask(seed=seed, metric="loss")
    ax.plot(ca.floats("checkpoint")[sel], ca.floats("value")[sel], "o-")
    ax.set_xlabel("iteration")
    ax.set_ylabel("training loss")
    ax.set_yscale("log")

    ax = axes[0, 1]
    for metric, label in (("cos_core", "core"), ("cos_baseline", "random PSD")):
        sel = ca.mask(seed=seed, metric=metric)
        ax.plot(ca.floats("checkpoint")[sel], ca.floats("value")[sel], "o-",
                label=label)
    ax.set_xlabel("iteration")
    ax.set_ylabel("cosine with NTK temporal view")
    ax.set_ylim(0, 1.05)
    ax.legend()

    ax = axes[1, 0]
    for metric, label in (("cumvar_ntk", "NTK"), ("cumvar_core", "core"),
                          ("cumvar_prop", "propagator")):
        sel = ca.mask(seed=seed, checkpoint=0, metric=metric)
        mode = ca.floats("mode")[sel]
        ax.plot(mode, ca.floats("value")[sel], "o-", label=label)
    ax.axhline(0.95, color="gray", lw=0.8, ls="--")
    ax.set_xlabel("mode")
    ax.set_ylabel("cumulative variance at init")
    ax.legend()

    ax = axes[1, 1]
    sel = modes.mask(seed=seed, checkpoint=ckpts[0], mode=1)
    trial = modes.floats("trial")[sel].astype(int)
    t = modes.floats("time")[sel].astype(int)
    value = modes.floats("value")[sel]
    grid = np.zeros((trial.max() + 1, t.max() + 1))
    grid[trial, t] = value
    im = ax.imshow(grid, aspect="auto", cmap="RdBu_r")
    ax.set_xlabel("time")
    ax.set_ylabel("trial")
    ax.set_title("NTK temporal mode 1 at init", fontsize=9)
    plt.colorbar(im, ax=ax, shrink=0.8)


def _render_fig4(tables, axes):
    (sr,) = tables
    seed = _seed_values(sr)[0]
    runs = (("net1", "sgd", "tab:blue"), ("net2", "sgd", "tab:orange"),
            ("net1", "kfp", "tab:green"))

    ax = axes[0, 0]
    for network, optimizer, color in runs:
        sel = sr.mask(seed=seed, network=network, optimizer=optimizer,
                      metric="loss")
        ax.plot(sr.floats("iteration")[sel], sr.floats("value")[sel],
                color=color, label=f"{network} {optimizer}")
    ax.set_xlabel("iteration")
    ax.set_ylabel("training loss")
    ax.set_yscale("log")
    ax.legend()

    ax = axes[0, 1]
    for network, optimizer, color in runs:
        sel = sr.mask(seed=seed, network=network, optimizer=optimizer,
                      metric="response_pair_alignment")
        ax.plot(sr.floats("iteration")[sel], sr.floats("value")[sel],
                color=color, label=f"{network} {optimizer}")
    ax.set_xlabel("iteration")
    ax.set_ylabel("response-pair target alignment")
    ax.legend()

    ax = axes[1, 0]
    for network, _, color in runs[:2]:
        for mode, style in ((1, "-"), (2, "--"), (3, ":")):
            sel = sr.mask(seed=seed, network=network, optimizer="sgd",
                          metric="mode_alignment", mode=mode)
            ax.plot(sr.floats("iteration")[sel], sr.floats("value")[sel],
                    style, color=color, label=f"{network} mode {mode}")
    ax.set_xlabel("iteration")
    ax.set_ylabel("per-mode target alignment")
    ax.legend(fontsize=7)

    ax = axes[1, 1]
    width = 0.35
    for i, (network, color) in enumerate((("net1", "tab:blue"),
                                          ("net2", "tab:orange"))):
        values = []
        for mode in (1, 2, 3):
            sel = sr.mask(seed=seed, network=network, optimizer="init",
                          metric="ntk_mode_alignment", mode=mode)
            values.append(sr.floats("value")[sel][0])
        ax.bar(np.arange(3) + (i - 0.5) * width, values, width, color=color,
               label=network)
    ax.set_yscale("log")
    ax.set_xticks(range(3), [f"mode {m}" for m in (1, 2, 3)])
    ax.set_ylabel("init NTK-target alignment")
    ax.legend()


def _render_fig5(tables, axes):
    (rr,) = tables
    seeds = _seed_values(rr)
    panels = (("rec", "gain", axes[0, 0], "temporal"),
              ("rec", "gain", axes[0, 1], "spatial"),
              ("in", "input_rank", axes[1, 0], "temporal"),
              ("in", "input_rank", axes[1, 1], "spatial"))
    for family, sweep_col, ax, view in panels:
        curves = []
        for seed in seeds:
            sel = (rr.mask(seed=seed, family=family, view=view,
                           method="participation_ratio", censored=0))
            x = rr.floats(sweep_col)[sel]
            y = rr.floats("value")[sel]
            order = np.argsort(x)
            ax.plot(x[order], y[order], color="gray", lw=0.8, alpha=0.6)
            curves.append(y[order])
        if curves and all(len(c) == len(curves[0]) for c in curves):
            ax.plot(np.sort(x), np.mean(curves, axis=0), "o-", color="tab:red")
        ax.set_xlabel("recurrent gain" if sweep_col == "gain" else "input rank")
        if sweep_col == "input_rank":
            ax.set_xscale("log", base=2)
        ax.set_ylabel(f"{view} effective rank")
        ax.set_title(f"train {family!r} family", fontsize=9)


def _render_fig6(tables, axes):
    tr, tmodes = tables
    seeds = _seed_values(tr)

    ax = axes[0, 0]
    n_x_values = sorted({int(v) for v, s in zip(tr.cells["n_x"],
                                                tr.cells["sweep"])
                         if s == "n_in"})
    for n_x in n_x_values:
        ys = []
        for seed in seeds:
            sel = tr.mask(seed=seed, sweep="n_in", n_x=n_x,
                          metric="temporal_rank_pr")
            x = tr.floats("n_in")[sel]
            order = np.argsort(x)
            ys.append(tr.floats("value")[sel][order])
        ax.plot(x[order], np.mean(ys, axis=0), "o-", label=f"n_x={n_x}")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("input dimension")
    ax.set_ylabel("temporal effective rank")
    ax.legend()

    ax = axes[0, 1]
    for seed in seeds:
        sel = tr.mask(seed=seed, sweep="fourier", metric="temporal_rank_pr")
        x = tr.floats("fourier")[sel]
        order = np.argsort(x)
        ax.plot(x[order], tr.floats("value")[sel][order], "o-",
                label=f"seed {seed}")
    ax.set_xlabel("Fourier frequencies")
    ax.set_ylabel("temporal effective rank")
    ax.legend()

    ax = axes[1, 0]
    seed = seeds[0]
    sel_rank = tr.mask(seed=seed, sweep="n_in", metric="core_rank")
    sel_bound = tr.mask(seed=seed, sweep="n_in", metric="core_rank_bound")
    x = tr.floats("n_in")[sel_rank]
    order = np.argsort(x)
    ax.plot(x[order], tr.floats("value")[sel_rank][order], "o",
            label="core rank")
    ax.plot(x[order], tr.floats("value")[sel_bound][order], "--",
            color="gray", label="bound")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("input dimension")
    ax.set_ylabel("rank of the site Gram")
    ax.legend()

    ax = axes[1, 1]
    for n_in in sorted({int(v) for v in tmodes.cells["n_in"]}):
        sel = tmodes.mask(seed=seeds[0], n_in=n_in, mode=1)
        t = tmodes.floats("time")[sel].astype(int)
        value = np.abs(tmodes.floats("value")[sel])
        profile = np.zeros(t.max() + 1)
        counts = np.zeros(t.max() + 1)
        np.add.at(profile, t, value)
        np.add.at(counts, t, 1.0)
        ax.plot(profile / counts, label=f"n_in={n_in}")
    ax.set_xlabel("time")
    ax.set_ylabel("|mode 1| (trial average)")
    ax.legend()


def _render_fig7(tables, axes):
    ends, traj = tables
    seed = _seed_values(ends)[0]
    planted = sorted({int(v) for v in ends.cells["planted"]})
    gains = sorted({float(v) for v in ends.cells["gain"]})
    cmap = plt.get_cmap("viridis")
    colors = {g: cmap(i / max(len(gains) - 1, 1)) for i, g in enumerate(gains)}
    for ax, m in zip(np.atleast_1d(axes).ravel(), planted):
        for g in gains:
            tsel = traj.mask(seed=seed, planted=m, gain=g)
            starts = traj.floats("start")[tsel].astype(int)
            steps = traj.floats("step")[tsel]
            p1, p2 = traj.floats("pc1")[tsel], traj.floats("pc2")[tsel]
            for s in np.unique(starts):
                ssel = starts == s
                order = np.argsort(steps[ssel])
                ax.plot(p1[ssel][order], p2[ssel][order],
                        color=colors[g], lw=0.4, alpha=0.3)
            esel = ends.mask(seed=seed, planted=m, gain=g)
            ax.scatter(ends.floats("pc1")[esel], ends.floats("pc2")[esel],
                       s=12, color=colors[g], label=f"g={g:g}")
        ax.set_title(f"{m} planted point(s)", fontsize=9)
        ax.set_xlabel("PC 1")
        ax.set_ylabel("PC 2")
        ax.legend(fontsize=7)


_RENDERERS = {
    "fig3": (_render_fig3, (2, 2)),
    "fig4": (_render_fig4, (2, 2)),
    "fig5": (_render_fig5, (2, 2)),
    "fig6": (_render_fig6, (2, 2)),
    "fig7": (_render_fig7, (1, 3)),
}


def render(spec: FigureSpec) -> Path:
    """Render the figure described by ``spec``; returns the output path.

    Raises SchemaError (with a column diff) if an input CSV does not match the
    documented schema for its slot.
    """
    names = FIGURE_INPUTS[spec.figure_id]
    tables = [read_table(path, name) for path, name in zip(spec.inputs, names)]
    fn, grid = _RENDERERS[spec.figure_id]
    fig, axes = plt.subplots(*grid, figsize=(4.2 * grid[1], 3.4 * grid[0]),
                             squeeze=False)
    if grid == (1, 3):
        axes = axes[0]
    fn(tables, axes)
    fig.suptitle(spec.title or spec.figure_id)
    fig.tight_layout()
    out = Path(spec.out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=spec.dpi, metadata={"Software": f"figplots {__version__}"})
    plt.close(fig)
    return out


def sample_spec(figure_id: str, out_path) -> FigureSpec:
    """FigureSpec wired to the committed sample CSVs shipped with the package."""
    samples = Path(__file__).parent / "samples"
    inputs = tuple(samples / f"{name}.csv" for name in FIGURE_INPUTS[figure_id])
    return FigureSpec(figure_id=figure_id, inputs=inputs, out_path=Path(out_path))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="figplots", description="Render figures from gsntk CSV outputs.")
    parser.add_argument("--figure", required=True, choices=sorted(FIGURE_INPUTS))
    parser.add_argument("--in", dest="inputs", action="append", default=None,
                        help="input CSV (repeat in the documented order); "
                             "omit to use the committed samples")
    parser.add_argument("--out", required=True)
    parser.add_argument("--dpi", type=int, default=150)
    args = parser.parse_args(argv)
    try:
        if args.inputs is None:
            spec = sample_spec(args.figure, args.out)
            spec = FigureSpec(figure_id=spec.figure_id, inputs=spec.inputs,
                              out_path=spec.out_path, dpi=args.dpi)
        else:
            spec = FigureSpec(figure_id=args.figure, inputs=tuple(args.inputs),
                              out_path=Path(args.out), dpi=args.dpi)
        render(spec)
    except (SchemaError, ValueError, FileNotFoundError) as e:
        print(f"figplots: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
