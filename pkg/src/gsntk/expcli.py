"""Command-line experiment runners with seeded configs and CSV/JSON outputs.

Subcommands
-----------
verify            oracle suite for the operator identities and estimators
core-alignment    NTK/core alignment over training on the delayed-reproduction task
selfref           self-referential training bias: plain vs planted-fixed-point GRU
rank-regimes      NTK effective ranks across recurrent gain and input rank
transformer-rank  input-dimension rank bottleneck in the attention model
ntfp              long-run dynamics with planted non-trivial fixed points

Each experiment reads a TOML config (packaged defaults under gsntk/configs/),
writes long-format CSV tables plus ``config.json`` and ``manifest.json`` into
the output directory, evaluates the qualitative checks recorded in the config,
and exits 0 (all checks pass), 1 (a check failed), or 2 (config error).  Every
run is a deterministic function of (config, seed); re-running produces
bit-identical CSVs.

CSV schemas (consumed by the figure-rendering package)
------------------------------------------------------
core_alignment.csv   seed, checkpoint, metric, mode, value
core_modes.csv       seed, checkpoint, mode, trial, time, value
selfref.csv          seed, network, optimizer, iteration, metric, mode, value
rank_regimes.csv     seed, family, gain, input_rank, view, method, value, censored
transformer_rank.csv seed, sweep, n_x, n_in, fourier, width, metric, value
transformer_modes.csv seed, n_in, mode, trial, time, value
endpoints.csv        seed, gain, planted, start, pc1, pc2, cluster_count
trajectories.csv     seed, gain, planted, start, step, pc1, pc2
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import hashlib
import json
import sys
import time
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

import gsntk
from gsntk import ntkops, tasks
from gsntk.linop import dense_wrap, materialize, partial_average, shape_of
from gsntk.models import attention, common, gru, rnn, validate
from gsntk.models.common import ModelError
from gsntk.rnla import ProbeConfig, effective_rank, hutchpp_trace, spectrum_summary, topk_eigs
from gsntk.tasks import (
    MemoryProConfig,
    StudentTeacherConfig,
    TaskBatch,
    TrainConfig,
    coordinate_points,
    fourier_embed,
    memory_pro_batch,
    network2_gru_params,
    ntfp_cluster_count,
    ntfp_weights,
    sigma_inside_trajectories,
    student_teacher,
    target_modes,
    train,
)

EXPERIMENTS = ("core-alignment", "selfref", "rank-regimes", "transformer-rank", "ntfp")


class ConfigError(ValueError):
    """Raised for unreadable, incomplete, or ill-typed experiment configs."""


# ------------------------------------------------------------- config handling

_SCHEMAS = {
    "core-alignment": {
        "n_h": int, "n_x": int, "n_t": int, "phases": list, "noise_var": float,
        "iterations": int, "lr": float, "checkpoint_every": int, "top_modes": int,
        "seeds": list, "checks": dict,
    },
    "selfref": {
        "n_h": int, "n_x": int, "n_t": int, "phases": list, "noise_var": float,
        "iterations": int, "lr": float, "kfp_lr": float, "kfp_damping": float,
        "log_every": int, "n_points": int, "point_scale": float, "seeds": list,
        "checks": dict,
    },
    "rank-regimes": {
        "n_in": int, "n_h": int, "n_out": int, "n_t": int, "n_x": int,
        "gains": list, "input_ranks": list, "seeds": list, "checks": dict,
    },
    "transformer-rank": {
        "n_t": int, "n_out": int, "n_attn": int, "n_mlp": int, "n_layers": int,
        "n_in_grid": list, "n_x_grid": list, "fourier_grid": list, "fourier_n_x": int,
        "width_grid": list, "width_n_in": int, "width_n_x": int, "width_n_t": int,
        "seeds": list, "dominant": dict, "checks": dict,
    },
    "ntfp": {
        "n_h": int, "point_scale": float, "gains": list, "planted_counts": list,
        "n_starts": int, "n_steps": int, "start_scale": float, "traj_stride": int,
        "seeds": list,
    },
}


def default_config_path(experiment: str) -> Path:
    name = experiment.replace("-", "_") + ".toml"
    return Path(__file__).parent / "configs" / name


def load_config(experiment: str, path=None, scale: str = "desk") -> dict:
    """Read and validate the ``scale`` section of an experiment config file."""
    if experiment not in _SCHEMAS:
        raise ConfigError(f"unknown experiment {experiment!r}")
    p = Path(path) if path is not None else default_config_path(experiment)
    try:
        with open(p, "rb") as f:
            data = tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {p}") from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{p}: {e}") from None
    if scale not in data:
        raise ConfigError(f"{p}: missing [{scale}] section "
                          f"(available: {sorted(data)})")
    cfg = data[scale]
    schema = _SCHEMAS[experiment]
    for field, kind in schema.items():
        if field not in cfg:
            raise ConfigError(f"{p} [{scale}]: missing field {field!r}")
        value = cfg[field]
        if kind is float and isinstance(value, int):
            value = cfg[field] = float(value)
        if not isinstance(value, kind):
            raise ConfigError(f"{p} [{scale}] field {field!r}: expected "
                              f"{kind.__name__}, got {type(value).__name__}")
    extra = set(cfg) - set(schema)
    if extra:
        raise ConfigError(f"{p} [{scale}]: unknown fields {sorted(extra)}")
    return cfg


# --------------------------------------------------------------- result tables

@dataclasses.dataclass
class ResultTable:
    """Long-format metric rows with a fixed column order and no NaN values."""

    columns: tuple[str, ...]
    rows: list = dataclasses.field(default_factory=list)

    def add(self, **fields) -> None:
        if set(fields) != set(self.columns):
            raise ValueError(f"row fields {sorted(fields)} do not match "
                             f"columns {sorted(self.columns)}")
        row = []
        for col in self.columns:
            v = fields[col]
            if isinstance(v, (float, np.floating)) and not np.isfinite(v):
                raise ValueError(f"non-finite value for column {col!r}")
            row.append(v)
        self.rows.append(tuple(row))

    def write(self, path) -> None:
        lines = [",".join(self.columns)]
        for row in self.rows:
            lines.append(",".join(_fmt_cell(v) for v in row))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fmt_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_run(out_dir, tables: dict[str, ResultTable], cfg: dict,
              seeds, started: float) -> None:
    """Write the CSV tables plus config.json and manifest.json to out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, table in tables.items():
        table.write(out / f"{name}.csv")
    cfg_json = json.dumps(cfg, indent=2, sort_keys=True)
    (out / "config.json").write_text(cfg_json + "\n", encoding="utf-8")
    manifest = {
        "config_hash": hashlib.sha256(cfg_json.encode()).hexdigest(),
        "seed": list(seeds),
        "version": gsntk.__version__,
        "wall_time_s": round(time.monotonic() - started, 3),
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _report(checks) -> bool:
    """Print one PASS/FAIL line per (description, ok) pair; return overall."""
    ok = True
    for desc, passed in checks:
        print(f"{'PASS' if passed else 'FAIL'}  {desc}")
        ok = ok and passed
    return ok


# ------------------------------------------------------------ numeric helpers

def _sym_spectrum(m: np.ndarray) -> np.ndarray:
    """Descending, clipped-to-nonnegative eigenvalues of a symmetric matrix."""
    w = np.linalg.eigvalsh(0.5 * (m + m.T))
    return np.clip(w, 0.0, None)[::-1]


def _frob_cos(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sum(a * b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def _wishart_like(rng: np.random.Generator, k: int, trace: float) -> np.ndarray:
    """Random PSD matrix of matching size, rescaled to the given trace."""
    g = rng.standard_normal((k, k))
    w = g @ g.T / k
    return w * (trace / np.trace(w))


def _numerical_rank(spectrum: np.ndarray, rel_tol: float = 1e-8) -> int:
    s = np.asarray(spectrum, float)
    top = s.max(initial=0.0)
    if top <= 0.0:
        return 0
    return int(np.count_nonzero(s > rel_tol * top))


def _propagator_temporal(state, chunk: int = 512) -> np.ndarray:
    """Dense temporal view of the propagator Gram P P* (feature-averaged)."""
    p = ntkops.propagator(state)
    n_x, n_t, n_f = state.h.shape
    k = n_x * n_t
    d = k * n_f
    out = np.zeros((k, k))
    for start in range(0, d, chunk):
        idx = np.arange(start, min(start + chunk, d))
        basis = np.zeros((len(idx), d))
        basis[np.arange(len(idx)), idx] = 1.0
        y = np.asarray(p.apply(basis.reshape((-1, n_x, n_t, n_f))))
        y2 = y.transpose(1, 2, 0, 3).reshape(k, -1)
        out += y2 @ y2.T
    return out / n_f


# ------------------------------------------------- experiment: core alignment

def exp_core_alignment(cfg: dict, seeds, out_dir) -> bool:
    started = time.monotonic()
    table = ResultTable(("seed", "checkpoint", "metric", "mode", "value"))
    modes_table = ResultTable(("seed", "checkpoint", "mode", "trial", "time", "value"))
    checks = []
    for seed in seeds:
        task = MemoryProConfig(n_x=cfg["n_x"], n_t=cfg["n_t"],
                               phases=tuple(cfg["phases"]),
                               noise_var=cfg["noise_var"], n_h=cfg["n_h"], seed=seed)
        train_batch = memory_pro_batch(task, noise=True)
        eval_batch = memory_pro_batch(task, noise=False)
        params = gru.init_params(np.random.default_rng(seed), cfg["n_h"], 3, 3)
        log = train(params, train_batch, "sgd",
                    TrainConfig(iterations=cfg["iterations"], lr=cfg["lr"],
                                checkpoint_every=cfg["checkpoint_every"]))
        if log.diverged:
            raise ModelError(f"core-alignment training diverged (seed {seed})")
        ckpts = list(log.checkpoints) + [(cfg["iterations"], log.final_params)]
        ckpt_dir = Path(out_dir) / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        for it, p in ckpts:
            common.save_params(ckpt_dir / f"seed{seed}_iter{it:06d}.npz", p)
        baseline_rng = np.random.default_rng([seed, 7919])
        resp_start = cfg["phases"][0] + cfg["phases"][1]
        n_x, n_t = cfg["n_x"], cfg["n_t"]
        cos_ok = True
        for it, p in ckpts:
            state = gru.forward(p, eval_batch.inputs)
            temporal, _ = ntkops.dense_views(state)
            sites = gru.weight_sites(state)
            core = sites.V @ sites.V.T
            cos_core = _frob_cos(temporal, core)
            cos_base = _frob_cos(
                temporal, _wishart_like(baseline_rng, temporal.shape[0],
                                        float(np.trace(temporal))))
            cos_ok = cos_ok and cos_core > cos_base
            logged = log.losses[log.iterations <= it]
            loss = float(logged[-1]) if len(logged) else float(log.losses[0])
            scalar_rows = {"loss": loss, "cos_core": cos_core, "cos_baseline": cos_base}

            w, v = np.linalg.eigh(0.5 * (temporal + temporal.T))
            order = np.argsort(w)[::-1]
            w, v = np.clip(w[order], 0.0, None), v[:, order]
            spectra = {"cumvar_ntk": w, "cumvar_core": _sym_spectrum(core),
                       "cumvar_prop": _sym_spectrum(_propagator_temporal(state))}
            for name, spec in spectra.items():
                cum = np.cumsum(spec) / np.sum(spec)
                for m in range(min(len(cum), 20)):
                    table.add(seed=seed, checkpoint=it, metric=name,
                              mode=m + 1, value=float(cum[m]))

            mode1 = v[:, 0].reshape(n_x, n_t)
            resp_energy = float(np.sum(mode1[:, resp_start:] ** 2) / np.sum(mode1 ** 2))
            scalar_rows["mode1_response_energy"] = resp_energy
            core_cum = np.cumsum(spectra["cumvar_core"]) / np.sum(spectra["cumvar_core"])
            core95 = int(np.searchsorted(core_cum, 0.95) + 1)
            scalar_rows["core_modes_95"] = core95
            for name, value in scalar_rows.items():
                table.add(seed=seed, checkpoint=it, metric=name, mode=None,
                          value=value)
            for m in range(cfg["top_modes"]):
                vec = v[:, m].reshape(n_x, n_t)
                for j in range(n_x):
                    for t in range(n_t):
                        modes_table.add(seed=seed, checkpoint=it, mode=m + 1,
                                        trial=j, time=t, value=float(vec[j, t]))
            if it == 0:
                checks.append((
                    f"seed {seed}: core spectrum reaches 95% variance in "
                    f"{core95} <= {cfg['checks']['core_modes_95_max']} modes at init",
                    core95 <= cfg["checks"]["core_modes_95_max"]))
                checks.append((
                    f"seed {seed}: NTK mode-1 response-period energy "
                    f"{resp_energy:.4f} < {cfg['checks']['mode1_response_energy_max']} at init",
                    resp_energy < cfg["checks"]["mode1_response_energy_max"]))
        checks.append((
            f"seed {seed}: cos(NTK, core) exceeds the equal-trace random-PSD "
            "baseline at every checkpoint", cos_ok))
    ok = _report(checks)
    write_run(out_dir, {"core_alignment": table, "core_modes": modes_table},
              cfg, seeds, started)
    return ok


# -------------------------------------------------------- experiment: selfref

def exp_selfref(cfg: dict, seeds, out_dir) -> bool:
    started = time.monotonic()
    table = ResultTable(("seed", "network", "optimizer", "iteration",
                         "metric", "mode", "value"))
    checks = []
    for seed in seeds:
        task = MemoryProConfig(n_x=cfg["n_x"], n_t=cfg["n_t"],
                               phases=tuple(cfg["phases"]),
                               noise_var=cfg["noise_var"], n_h=cfg["n_h"], seed=seed)
        train_batch = memory_pro_batch(task, noise=True)
        eval_batch = memory_pro_batch(task, noise=False)
        nets = {
            "net1": gru.init_params(np.random.default_rng(seed), cfg["n_h"], 3, 3),
            "net2": network2_gru_params(np.random.default_rng([seed, 5000]),
                                        cfg["n_h"], 3, 3,
                                        n_points=cfg["n_points"],
                                        scale=cfg["point_scale"]),
        }
        modes = target_modes(eval_batch.targets)[:, :3]
        t_mat = eval_batch.targets.reshape(-1, eval_batch.targets.shape[-1])
        mode_weights = np.array([float((modes[:, m] @ t_mat) @ (modes[:, m] @ t_mat))
                                 for m in range(3)])

        def ntk_aligns(params):
            state = gru.forward(params, eval_batch.inputs)
            temporal, _ = ntkops.dense_views(state)
            norm = np.linalg.norm(temporal)
            return np.array([float(modes[:, m] @ temporal @ modes[:, m]) / norm
                             for m in range(3)])

        init_align = {}
        for name, params in nets.items():
            aligns = ntk_aligns(nets[name])
            init_align[name] = aligns
            for m in range(3):
                table.add(seed=seed, network=name, optimizer="init", iteration=0,
                          metric="ntk_mode_alignment", mode=m + 1,
                          value=float(aligns[m]))
        ck = cfg["checks"]
        ratio_self = init_align["net1"][2] / init_align["net1"][0]
        checks.append((
            f"seed {seed}: network-1 init NTK mode-3/mode-1 alignment "
            f"{ratio_self:.4f} <= {ck['init_mode3_over_mode1_max']}",
            ratio_self <= ck["init_mode3_over_mode1_max"]))
        ratio_nets = init_align["net2"][2] / init_align["net1"][2]
        checks.append((
            f"seed {seed}: network-2 init mode-3 alignment is {ratio_nets:.1f}x "
            f"network-1's (need >= {ck['init_net2_over_net1_min']})",
            ratio_nets >= ck["init_net2_over_net1_min"]))

        runs = [("net1", "sgd", cfg["lr"]), ("net2", "sgd", cfg["lr"]),
                ("net1", "kfp", cfg["kfp_lr"])]
        final = {}
        for name, opt, lr in runs:
            log = train(nets[name], train_batch, opt,
                        TrainConfig(iterations=cfg["iterations"], lr=lr,
                                    log_every=cfg["log_every"], n_modes=3,
                                    damping=cfg["kfp_damping"],
                                    checkpoint_every=max(1, cfg["iterations"] // 4)))
            pair = (log.mode_alignments[:, 1:] @ mode_weights[1:]
                    / mode_weights[1:].sum())
            for i, it in enumerate(log.iterations):
                table.add(seed=seed, network=name, optimizer=opt,
                          iteration=int(it), metric="loss", mode=None,
                          value=float(log.losses[i]))
                for m in range(3):
                    table.add(seed=seed, network=name, optimizer=opt,
                              iteration=int(it), metric="mode_alignment",
                              mode=m + 1, value=float(log.mode_alignments[i, m]))
                table.add(seed=seed, network=name, optimizer=opt,
                          iteration=int(it), metric="response_pair_alignment",
                          mode=None, value=float(pair[i]))
            ckpts = list(log.checkpoints) + [(cfg["iterations"], log.final_params)]
            for it, params in ckpts:
                aligns = init_align[name] if it == 0 else ntk_aligns(params)
                for m in range(3):
                    table.add(seed=seed, network=name, optimizer=opt,
                              iteration=int(it), metric="ntk_mode_alignment",
                              mode=m + 1, value=float(aligns[m]))
            final[(name, opt)] = {"loss": float(log.losses[-1]),
                                  "pair": float(pair[-1]),
                                  "mode1": float(log.mode_alignments[-1, 0]),
                                  "diverged": log.diverged}
        checks.append((
            f"seed {seed}: network-1 SGD response-pair alignment stalls at "
            f"{final[('net1', 'sgd')]['pair']:.3f} <= {ck['net1_response_alignment_max']}",
            final[("net1", "sgd")]["pair"] <= ck["net1_response_alignment_max"]))
        checks.append((
            f"seed {seed}: network-2 SGD response-pair alignment "
            f"{final[('net2', 'sgd')]['pair']:.3f} exceeds network-1's",
            final[("net2", "sgd")]["pair"] > final[("net1", "sgd")]["pair"]))
        for name in ("net1", "net2"):
            checks.append((
                f"seed {seed}: {name} SGD mode-1 alignment "
                f"{final[(name, 'sgd')]['mode1']:.3f} >= {ck['mode1_alignment_min']}",
                final[(name, "sgd")]["mode1"] >= ck["mode1_alignment_min"]))
        checks.append((
            f"seed {seed}: final training loss network-2 "
            f"{final[('net2', 'sgd')]['loss']:.4f} < network-1 "
            f"{final[('net1', 'sgd')]['loss']:.4f} under matched SGD",
            final[("net2", "sgd")]["loss"] < final[("net1", "sgd")]["loss"]))
    ok = _report(checks)
    write_run(out_dir, {"selfref": table}, cfg, seeds, started)
    return ok


# --------------------------------------------------- experiment: rank regimes

_RANK_METRICS = (("temporal", "participation_ratio"), ("temporal", "variance_95"),
                 ("spatial", "participation_ratio"), ("spatial", "variance_95"))


def _rank_point(args) -> list[tuple]:
    """One (family, gain, input_rank, seed) sweep point; returns table rows."""
    family, gain, input_rank, seed, base = args
    st = StudentTeacherConfig(family=family, gain=gain, input_rank=input_rank,
                              seed=seed, n_in=base["n_in"], n_h=base["n_h"],
                              n_out=base["n_out"], n_t=base["n_t"], n_x=base["n_x"])
    rows = []
    try:
        _, student, batch = student_teacher(st)
        state = rnn.forward(student, batch.inputs)
        temporal, spatial = ntkops.dense_views(state)
    except ModelError:
        for view, method in _RANK_METRICS:
            rows.append((seed, family, gain, input_rank, view, method, None, 1))
        return rows
    spectra = {"temporal": _sym_spectrum(temporal), "spatial": _sym_spectrum(spatial)}
    for view, method in _RANK_METRICS:
        value = float(effective_rank(spectra[view], method=method))
        rows.append((seed, family, gain, input_rank, view, method, value, 0))
    return rows


def _pmap(fn, items, workers: int):
    if workers <= 1:
        return [fn(item) for item in items]
    with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def exp_rank_regimes(cfg: dict, seeds, out_dir, workers: int = 1) -> bool:
    started = time.monotonic()
    table = ResultTable(("seed", "family", "gain", "input_rank", "view",
                         "method", "value", "censored"))
    base = {k: cfg[k] for k in ("n_in", "n_h", "n_out", "n_t", "n_x")}
    points = [("rec", float(g), None, seed, base)
              for seed in seeds for g in cfg["gains"]]
    points += [("in", 1.0, int(r), seed, base)
               for seed in seeds for r in cfg["input_ranks"]]
    values = {}
    for rows in _pmap(_rank_point, points, workers):
        for row in rows:
            table.add(**dict(zip(table.columns, row)))
            seed, family, gain, input_rank, view, method, value, censored = row
            if not censored:
                values[(family, gain, input_rank, seed, view, method)] = value

    from scipy import stats

    checks = []
    for seed in seeds:
        temporal_by_rank = [values.get(("in", 1.0, r, seed, "temporal",
                                        "participation_ratio"))
                            for r in cfg["input_ranks"]]
        if None in temporal_by_rank:
            checks.append((f"seed {seed}: temporal rank vs input rank "
                           "(censored points prevent the check)", False))
        else:
            rho = float(stats.spearmanr(cfg["input_ranks"], temporal_by_rank).statistic)
            checks.append((
                f"seed {seed}: temporal rank vs input rank Spearman rho "
                f"{rho:.3f} >= {cfg['checks']['spearman_min']}",
                rho >= cfg["checks"]["spearman_min"]))
        spatial = {g: values.get(("rec", float(g), None, seed, "spatial",
                                  "participation_ratio")) for g in (1.0, 3.0)}
        ok_sp = (None not in spatial.values()) and spatial[3.0] < spatial[1.0]
        checks.append((
            f"seed {seed}: spatial rank collapses with gain "
            f"(g=3: {spatial[3.0]:.2f} < g=1: {spatial[1.0]:.2f})" if ok_sp else
            f"seed {seed}: spatial rank at g=3 not below g=1", ok_sp))
        temporal_by_g = [values.get(("rec", float(g), None, seed, "temporal",
                                     "participation_ratio")) for g in cfg["gains"]]
        if None in temporal_by_g:
            checks.append((f"seed {seed}: temporal rank vs gain "
                           "(censored points prevent the check)", False))
        else:
            peak = int(np.argmax(temporal_by_g))
            checks.append((
                f"seed {seed}: temporal rank vs gain peaks at interior "
                f"g={cfg['gains'][peak]}", 0 < peak < len(cfg["gains"]) - 1))
    ok = _report(checks)
    write_run(out_dir, {"rank_regimes": table}, cfg, seeds, started)
    return ok


# ----------------------------------------------- experiment: transformer rank

def _attn_mask(n_layers: int) -> frozenset:
    return frozenset(attention.ATTN_FAMILIES
                     + tuple(attention.mlp_family(i + 1) for i in range(n_layers - 1)))


def _attn_point(args) -> dict:
    """One attention sweep point: temporal spectrum plus core rank data."""
    seed, inputs_key, n_in, n_attn, n_mlp, n_layers, n_x, n_t, n_out = args
    want_full = inputs_key[0] == 2  # width sweep: also the full-operator spectrum
    rng = np.random.default_rng([seed, *inputs_key])
    if inputs_key[0] == 1:  # Fourier sweep: scalar input, embedded channels
        x = fourier_embed(rng.uniform(0.0, 1.0, (n_x, n_t, 1)), inputs_key[1])
    else:
        x = rng.standard_normal((n_x, n_t, n_in))
    params = attention.init_params(rng, x.shape[-1], n_attn, n_mlp, n_layers,
                                   n_out, trainable_mask=_attn_mask(n_layers))
    state = attention.forward(params, x)
    temporal, spatial = ntkops.dense_views(state)
    w, v = np.linalg.eigh(0.5 * (temporal + temporal.T))
    order = np.argsort(w)[::-1]
    w, v = np.clip(w[order], 0.0, None), v[:, order]
    sites = attention.weight_sites(state)
    core_rank = _numerical_rank(np.linalg.svd(sites.V, compute_uv=False) ** 2)
    full_spectrum = None
    if want_full:
        full = _sym_spectrum(ntkops.param_side_gram(state))
        full_spectrum = full[full > 1e-12 * max(full.max(), 1e-300)]
    return {"temporal_spectrum": w, "top_vectors": v[:, :2],
            "spatial_spectrum": _sym_spectrum(spatial),
            "full_spectrum": full_spectrum,
            "core_rank": core_rank, "shape": (n_x, n_t),
            "model_n_in": x.shape[-1]}


def exp_transformer_rank(cfg: dict, seeds, out_dir, workers: int = 1) -> bool:
    started = time.monotonic()
    table = ResultTable(("seed", "sweep", "n_x", "n_in", "fourier", "width",
                         "metric", "value"))
    modes_table = ResultTable(("seed", "n_in", "mode", "trial", "time", "value"))
    dom = cfg["dominant"]
    points = []
    for seed in seeds:
        for n_x in cfg["n_x_grid"]:
            for n_in in cfg["n_in_grid"]:
                points.append(("n_in", seed, (0, n_in, n_x), n_in, cfg["n_attn"],
                               cfg["n_mlp"], cfg["n_layers"], n_x, cfg["n_t"],
                               cfg["n_out"]))
        for freq in cfg["fourier_grid"]:
            points.append(("fourier", seed, (1, freq), 1, cfg["n_attn"],
                           cfg["n_mlp"], cfg["n_layers"], cfg["fourier_n_x"],
                           cfg["n_t"], cfg["n_out"]))
        for width in cfg["width_grid"]:
            points.append(("width", seed, (2, width), cfg["width_n_in"], width,
                           cfg["n_mlp"], cfg["n_layers"], cfg["width_n_x"],
                           cfg["width_n_t"], cfg["n_out"]))
        for n_in in cfg["n_in_grid"]:
            points.append(("dominant", seed, (3, n_in, dom["n_x"]), n_in,
                           dom["n_attn"], dom["n_mlp"], dom["n_layers"],
                           dom["n_x"], cfg["n_t"], cfg["n_out"]))
    results = _pmap(_attn_point, [pt[1:] for pt in points], workers)

    values = {}
    checks = []
    endpoints = (min(cfg["n_in_grid"]), max(cfg["n_in_grid"]))
    for (sweep, seed, *_), args, res in zip(points, points, results):
        _, _, key, n_in, n_attn, n_mlp, n_layers, n_x, n_t, _ = args
        freq = key[1] if sweep == "fourier" else None
        width = n_attn if sweep == "width" else None
        spec = res["temporal_spectrum"]
        row = dict(seed=seed, sweep=sweep, n_x=n_x, n_in=n_in, fourier=freq,
                   width=width)
        metrics = {
            "temporal_rank_pr": float(effective_rank(spec)),
            "temporal_rank_v95": float(effective_rank(spec, method="variance_95")),
            "core_rank": float(res["core_rank"]),
            "core_rank_bound": float(3 * res["model_n_in"] + n_attn
                                     + (n_layers - 1) * n_mlp),
            "lambda_ratio": float(spec[1] / spec[0]),
        }
        if sweep == "width":
            metrics["spatial_rank_pr"] = float(effective_rank(res["spatial_spectrum"]))
            metrics["full_rank_pr"] = float(effective_rank(res["full_spectrum"]))
        for metric, value in metrics.items():
            table.add(**row, metric=metric, value=value)
            values[(sweep, seed, n_x, n_in, freq, width, metric)] = value
        if sweep == "dominant" and n_in in endpoints:
            for m in range(2):
                vec = res["top_vectors"][:, m].reshape(res["shape"])
                for j in range(res["shape"][0]):
                    for t in range(res["shape"][1]):
                        modes_table.add(seed=seed, n_in=n_in, mode=m + 1,
                                        trial=j, time=t, value=float(vec[j, t]))
        checks.append((
            f"seed {seed} {sweep} n_x={n_x} n_in={n_in}: core rank "
            f"{res['core_rank']} <= bound {int(metrics['core_rank_bound'])}",
            res["core_rank"] <= metrics["core_rank_bound"]))

    for seed in seeds:
        for n_x in cfg["n_x_grid"]:
            ranks = [values[("n_in", seed, n_x, n, None, None, "temporal_rank_pr")]
                     for n in cfg["n_in_grid"]]
            checks.append((
                f"seed {seed} n_x={n_x}: temporal rank strictly increasing in "
                f"n_in ({', '.join(f'{r:.2f}' for r in ranks)})",
                all(b > a for a, b in zip(ranks, ranks[1:]))))
        ranks = [values[("fourier", seed, cfg["fourier_n_x"], 1, f, None,
                         "temporal_rank_pr")] for f in cfg["fourier_grid"]]
        checks.append((
            f"seed {seed}: temporal rank strictly increasing in Fourier "
            f"frequencies ({', '.join(f'{r:.2f}' for r in ranks)})",
            all(b > a for a, b in zip(ranks, ranks[1:]))))
        ratio = values[("dominant", seed, dom["n_x"], 1, None, None, "lambda_ratio")]
        checks.append((
            f"seed {seed}: attention-only n_in=1 dominant mode ratio "
            f"{ratio:.4f} < {cfg['checks']['lambda_ratio_max']}",
            ratio < cfg["checks"]["lambda_ratio_max"]))
    ok = _report(checks)
    write_run(out_dir, {"transformer_rank": table, "transformer_modes": modes_table},
              cfg, seeds, started)
    return ok


# ----------------------------------------------------------- experiment: ntfp

def exp_ntfp(cfg: dict, seeds, out_dir) -> bool:
    started = time.monotonic()
    ends_table = ResultTable(("seed", "gain", "planted", "start", "pc1", "pc2",
                              "cluster_count"))
    traj_table = ResultTable(("seed", "gain", "planted", "start", "step",
                              "pc1", "pc2"))
    checks = []
    for seed in seeds:
        for gain in cfg["gains"]:
            for planted in cfg["planted_counts"]:
                rng = np.random.default_rng([seed, int(round(100 * gain)), planted])
                points = coordinate_points(cfg["n_h"], planted, cfg["point_scale"])
                w = ntfp_weights(rng, cfg["n_h"], points, gain=gain)
                h0 = cfg["start_scale"] * rng.standard_normal(
                    (cfg["n_starts"], cfg["n_h"]))
                traj = sigma_inside_trajectories(w, h0, cfg["n_steps"])
                ends = traj[-1]
                count = ntfp_cluster_count(ends, points)
                center = ends.mean(axis=0)
                _, _, vt = np.linalg.svd(ends - center, full_matrices=False)
                basis = vt[:2].T
                pcs = (ends - center) @ basis
                for i in range(cfg["n_starts"]):
                    ends_table.add(seed=seed, gain=gain, planted=planted, start=i,
                                   pc1=float(pcs[i, 0]), pc2=float(pcs[i, 1]),
                                   cluster_count=count)
                for step in range(0, cfg["n_steps"] + 1, cfg["traj_stride"]):
                    proj = (traj[step] - center) @ basis
                    for i in range(cfg["n_starts"]):
                        traj_table.add(seed=seed, gain=gain, planted=planted,
                                       start=i, step=step,
                                       pc1=float(proj[i, 0]), pc2=float(proj[i, 1]))
                checks.append((
                    f"seed {seed} g={gain} m={planted}: {count} endpoint "
                    f"cluster(s), expected {2 ** planted}", count == 2 ** planted))
    ok = _report(checks)
    write_run(out_dir, {"endpoints": ends_table, "trajectories": traj_table},
              cfg, seeds, started)
    return ok


# --------------------------------------------------------------------- verify

def _verify_factorization(kind: str) -> float:
    rng = np.random.default_rng(11)
    if kind == "rnn":
        params = rnn.init_params(rng, 4, 2, 2)
        state = rnn.forward(params, rng.standard_normal((3, 5, 2)))
    else:
        params = gru.init_params(rng, 4, 2, 2)
        state = gru.forward(params, rng.standard_normal((3, 5, 2)))
    direct = materialize(ntkops.global_ntk(state, "direct").ntk)
    lifted = materialize(ntkops.global_ntk(state, "lifted").ntk)
    return float(np.linalg.norm(lifted - direct) / np.linalg.norm(direct))


def _small_rnn_state(seed: int = 12):
    rng = np.random.default_rng(seed)
    params = rnn.init_params(rng, 4, 2, 2)
    return rnn.forward(params, rng.standard_normal((3, 5, 2))), params


def _dense_jacobian(state, fd_eps: float | None = None) -> np.ndarray:
    """Rows = parameter directions, columns = flattened state response."""
    mod = common.backend(state.kind)
    prop = ntkops.propagator(state)
    rows = []
    for fam, (r, c) in ntkops._param_family_shapes(state).items():
        for i in range(r * c):
            d = np.zeros(r * c)
            d[i] = 1.0
            dtheta = {fam: d.reshape(r, c)}
            if fd_eps is None:
                rows.append(np.asarray(
                    prop.apply(mod.param_jvp_full(state, dtheta))).ravel())
            else:
                plus = mod.forward(mod.perturb_params(state.params, dtheta, fd_eps),
                                   state.x_ref).h
                minus = mod.forward(mod.perturb_params(state.params, dtheta, -fd_eps),
                                    state.x_ref).h
                rows.append(((plus - minus) / (2 * fd_eps)).ravel())
    return np.stack(rows)


def run_verify(seed: int) -> bool:
    """Oracle suite for the operator identities, estimators, and constructions."""
    results = []

    def check(name, value, tol):
        results.append((name, value, tol, value <= tol))

    check("RNN factorization: lifted core matches direct assembly",
          _verify_factorization("rnn"), 1e-8)
    check("GRU factorization: lifted core matches direct assembly",
          _verify_factorization("gru"), 1e-8)

    state, params = _small_rnn_state()
    jac = _dense_jacobian(state)
    gram = jac.T @ jac
    op = materialize(ntkops.global_ntk(state).ntk)
    check("brute-force Jacobian Gram matches the operator NTK",
          float(np.linalg.norm(gram - op) / np.linalg.norm(op)), 1e-8)
    jac_fd = _dense_jacobian(state, fd_eps=1e-5)
    check("analytic Jacobian matches central finite differences",
          float(np.linalg.norm(jac_fd - jac) / np.linalg.norm(jac)), 1e-4)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for kind in ("rnn", "gru"):
        mod = common.backend(kind)
        p = mod.init_params(np.random.default_rng(seed + 1), 5, 2, 2)
        st = mod.forward(p, rng.standard_normal((3, 6, 2)))
        bundle = ntkops.global_ntk(st)
        for _ in range(10):
            err = rng.standard_normal(st.h.shape)
            quad = ntkops.quadratic_form(bundle.ntk, err)
            filt = ntkops.core_filter_norm(
                st, bundle.sites, ntkops.adjoint_state(bundle.propagator, err))
            worst = max(worst, abs(quad - filt) / abs(quad))
    check("adjoint-filter identity <NTK e, e> = |V^T A|^2 (20 errors)",
          worst, 1e-8)

    violations = 0
    for i in range(30):
        r = np.random.default_rng([seed, i])
        p = rnn.init_params(r, 4 + i % 3, 2, 1)
        st = rnn.forward(p, r.standard_normal((2 + i % 2, 5, 2)))
        try:
            ntkops.delta_h_rank_check(ntkops.global_ntk(st).ntk,
                                      r.standard_normal(st.h.shape))
        except Exception:
            violations += 1
    check("space-time rank bottleneck holds on 30 random instances",
          float(violations), 0.0)

    fd_worst = 0.0
    for p, x in [(rnn.init_params(rng, 4, 2, 2), rng.standard_normal((2, 4, 2))),
                 (gru.init_params(rng, 4, 2, 2), rng.standard_normal((2, 4, 2))),
                 (attention.init_params(rng, 3, 4, 5, 2, 2,
                                        trainable_mask=_attn_mask(2)),
                  rng.standard_normal((2, 4, 3)))]:
        fd_worst = max(fd_worst, validate.fd_check(p, x)["max"])
    check("model derivative finite-difference checks (RNN, GRU, attention)",
          fd_worst, 1e-6)

    b = rng.standard_normal((120, 5))
    low_rank = b @ b.T
    est = hutchpp_trace(dense_wrap(low_rank, psd_hint=True),
                        ProbeConfig(sketch_size=16, residual_probes=8, seed=seed))
    check("Hutch++ trace exact on a rank-5 operator",
          abs(est - np.trace(low_rank)) / np.trace(low_rank), 1e-9)
    g = np.random.default_rng(seed + 2).standard_normal((300, 300))
    psd = g @ g.T
    hits = sum(
        abs(hutchpp_trace(dense_wrap(psd, psd_hint=True),
                          ProbeConfig(sketch_size=64, residual_probes=64, seed=s))
            - np.trace(psd)) / np.trace(psd) <= 0.02
        for s in range(5))
    check("Hutch++ within 2% on a dense 300x300 PSD operator (>= 4/5 probes)",
          float(hits < 4), 0.0)

    dom = shape_of(("batch", 2), ("time", 3), ("feature", 4))
    mat = np.random.default_rng(seed + 3).standard_normal((24, 24))
    full = materialize(dense_wrap(mat, domain=dom, codomain=dom))
    reduced = materialize(partial_average(dense_wrap(mat, domain=dom, codomain=dom),
                                          (2,)))
    tensor = full.reshape(2, 3, 4, 2, 3, 4)
    oracle = np.einsum("jtfkuf->jtku", tensor).reshape(6, 6) / 4.0
    check("partial average matches the dense traced oracle",
          float(np.linalg.norm(reduced - oracle) / np.linalg.norm(oracle)), 1e-10)

    g = np.random.default_rng(seed + 4).standard_normal((80, 80))
    psd_small = g @ g.T
    summ, _ = topk_eigs(dense_wrap(psd_small, psd_hint=True), 5,
                        ProbeConfig(seed=seed))
    exact = np.sort(np.linalg.eigvalsh(psd_small))[::-1][:5]
    check("top-k eigenvalues match the dense eigensolver",
          float(np.max(np.abs(summ.eigenvalues - exact) / exact)), 1e-6)

    points = coordinate_points(32, 2)
    w = ntfp_weights(np.random.default_rng(seed + 5), 32, points)
    resid = max(float(np.linalg.norm(w @ np.tanh(p) - p)) for p in points)
    check("planted points are exact fixed points of h -> W tanh(h)", resid, 1e-10)
    gp = network2_gru_params(np.random.default_rng(seed + 6), 16, 3, 3)
    gru_resid = max(
        float(np.linalg.norm(gru._step(gp, p[None], np.zeros((1, 3))) - p[None]))
        for p in coordinate_points(16, 5, 0.8))
    check("planted GRU states are exact zero-input fixed points", gru_resid, 1e-10)

    st, params = _small_rnn_state(seed + 7)
    batch = TaskBatch(inputs=st.x_ref,
                      targets=np.random.default_rng(seed + 8)
                      .standard_normal((3, 5, 2)))
    loss, grads, _ = tasks._loss_and_grads(params, batch)
    fd_err = 0.0
    for fam, grad in grads.items():
        d = np.random.default_rng([seed, sum(map(ord, fam))]).standard_normal(grad.shape)
        eps = 1e-6
        lp = tasks._loss_and_grads(
            rnn.perturb_params(params, {fam: d}, eps), batch)[0]
        lm = tasks._loss_and_grads(
            rnn.perturb_params(params, {fam: d}, -eps), batch)[0]
        fd_err = max(fd_err, abs((lp - lm) / (2 * eps) - float(np.sum(grad * d)))
                     / max(abs(float(np.sum(grad * d))), 1e-12))
    check("training loss gradient matches finite differences", fd_err, 1e-6)

    width = max(len(name) for name, *_ in results)
    ok = True
    for name, value, tol, passed in results:
        print(f"{'PASS' if passed else 'FAIL'}  {name:<{width}}  "
              f"value {value:.3e}  tol {tol:.1e}")
        ok = ok and passed
    return ok


# ------------------------------------------------------------------------ CLI

def _parse_seeds(text: str) -> list[int]:
    if ".." in text:
        lo, _, hi = text.partition("..")
        try:
            lo_i, hi_i = int(lo), int(hi)
        except ValueError:
            raise ConfigError(f"bad seed range {text!r} (expected e.g. 1..3)") from None
        if hi_i < lo_i:
            raise ConfigError(f"empty seed range {text!r}")
        return list(range(lo_i, hi_i + 1))
    try:
        return [int(text)]
    except ValueError:
        raise ConfigError(f"bad seed {text!r}") from None


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gsntk", description="Global-state NTK experiment runners.")
    sub = parser.add_subparsers(dest="command", required=True)
    v = sub.add_parser("verify", help="run the theorem/oracle suite")
    v.add_argument("--seed", default="0")
    for name in EXPERIMENTS:
        p = sub.add_parser(name)
        p.add_argument("config", nargs="?", default=None,
                       help="TOML config path (default: packaged)")
        p.add_argument("--seed", default=None,
                       help="seed or inclusive range, e.g. 3 or 1..3 "
                            "(default: seeds list from the config)")
        p.add_argument("--out", default=None,
                       help="output directory (default: runs/<experiment>)")
        p.add_argument("--scale", choices=("desk", "paper"), default="desk")
        p.add_argument("--workers", type=int, default=1)
    return parser


def cli_main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    try:
        if args.command == "verify":
            seeds = _parse_seeds(args.seed)
            return 0 if run_verify(seeds[0]) else 1
        cfg = load_config(args.command, args.config, args.scale)
        seeds = _parse_seeds(args.seed) if args.seed is not None else cfg["seeds"]
        out = args.out if args.out is not None else f"runs/{args.command}"
        if args.command == "core-alignment":
            ok = exp_core_alignment(cfg, seeds, out)
        elif args.command == "selfref":
            ok = exp_selfref(cfg, seeds, out)
        elif args.command == "rank-regimes":
            ok = exp_rank_regimes(cfg, seeds, out, args.workers)
        elif args.command == "transformer-rank":
            ok = exp_transformer_rank(cfg, seeds, out, args.workers)
        else:
            ok = exp_ntfp(cfg, seeds, out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    return 0 if ok else 1


def main() -> None:
    sys.exit(cli_main(sys.argv[1:]))


if __name__ == "__main__":
    main()
