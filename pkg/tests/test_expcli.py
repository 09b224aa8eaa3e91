"""Tests for the experiment CLI: configs, result tables, and run contracts."""

import json
from pathlib import Path

import numpy as np
import pytest

from gsntk import expcli, ntkops
from gsntk.expcli import ConfigError, ResultTable, cli_main, load_config
from gsntk.linop import adjoint, compose, materialize
from gsntk.models import rnn


class TestConfig:
    @pytest.mark.parametrize("experiment", expcli.EXPERIMENTS)
    @pytest.mark.parametrize("scale", ["desk", "paper"])
    def test_packaged_defaults_validate(self, experiment, scale):
        cfg = load_config(experiment, scale=scale)
        assert isinstance(cfg["seeds"], list) and cfg["seeds"]

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config("ntfp", tmp_path / "nope.toml")

    def test_bad_toml_reports_line(self, tmp_path):
        p = tmp_path / "bad.toml"
        p.write_text("[desk\nn_h = 3\n")
        with pytest.raises(ConfigError, match="line"):
            load_config("ntfp", p)

    def test_missing_scale_section(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text("[desk]\nn_h = 4\n")
        with pytest.raises(ConfigError, match=r"missing \[paper\]"):
            load_config("ntfp", p, scale="paper")

    def test_missing_field_named(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text("[desk]\nn_h = 4\n")
        with pytest.raises(ConfigError, match="'point_scale'"):
            load_config("ntfp", p)

    def test_wrong_type_named(self, tmp_path):
        src = expcli.default_config_path("ntfp").read_text()
        p = tmp_path / "c.toml"
        p.write_text(src.replace("n_starts = 50", 'n_starts = "many"'))
        with pytest.raises(ConfigError, match="'n_starts'"):
            load_config("ntfp", p)

    def test_unknown_field_rejected(self, tmp_path):
        src = expcli.default_config_path("ntfp").read_text()
        p = tmp_path / "c.toml"
        p.write_text(src.replace("[desk]", "[desk]\nbogus = 1"))
        with pytest.raises(ConfigError, match="bogus"):
            load_config("ntfp", p)

    def test_unknown_experiment(self):
        with pytest.raises(ConfigError, match="unknown experiment"):
            load_config("frobnicate")


class TestResultTable:
    def test_stable_header_and_formatting(self, tmp_path):
        t = ResultTable(("a", "b", "c"))
        t.add(a=1, b=0.5, c="x")
        t.add(a=2, b=None, c="y")
        t.write(tmp_path / "t.csv")
        assert (tmp_path / "t.csv").read_text() == "a,b,c\n1,0.5,x\n2,,y\n"

    def test_rejects_nan(self):
        t = ResultTable(("a",))
        with pytest.raises(ValueError, match="non-finite"):
            t.add(a=float("nan"))

    def test_rejects_column_mismatch(self):
        t = ResultTable(("a", "b"))
        with pytest.raises(ValueError, match="columns"):
            t.add(a=1)


class TestSeedParsing:
    def test_single(self):
        assert expcli._parse_seeds("7") == [7]

    def test_range(self):
        assert expcli._parse_seeds("1..3") == [1, 2, 3]

    def test_bad(self):
        with pytest.raises(ConfigError):
            expcli._parse_seeds("x..y")
        with pytest.raises(ConfigError):
            expcli._parse_seeds("3..1")


class TestHelpers:
    def test_propagator_temporal_matches_partial_average(self):
        rng = np.random.default_rng(0)
        params = rnn.init_params(rng, 4, 2, 2)
        state = rnn.forward(params, rng.standard_normal((3, 5, 2)))
        p = ntkops.propagator(state)
        gram = ntkops._psd(compose(p, adjoint(p)))
        oracle = materialize(ntkops.temporal_view(gram))
        got = expcli._propagator_temporal(state, chunk=7)
        assert np.linalg.norm(got - oracle) <= 1e-12 * np.linalg.norm(oracle)

    def test_wishart_baseline_trace(self):
        w = expcli._wishart_like(np.random.default_rng(0), 30, 12.5)
        assert w.shape == (30, 30)
        assert np.trace(w) == pytest.approx(12.5)
        assert np.min(np.linalg.eigvalsh(w)) >= -1e-10

    def test_numerical_rank(self):
        assert expcli._numerical_rank(np.array([1.0, 1e-3, 1e-12])) == 2
        assert expcli._numerical_rank(np.zeros(3)) == 0


class TestCli:
    def test_unknown_subcommand_exit_2(self, capsys):
        assert cli_main(["frobnicate"]) == 2
        capsys.readouterr()

    def test_bad_config_exit_2(self, tmp_path, capsys):
        assert cli_main(["ntfp", str(tmp_path / "nope.toml")]) == 2
        assert "config error" in capsys.readouterr().err

    def test_verify_passes(self, capsys):
        assert cli_main(["verify", "--seed", "0"]) == 0
        out = capsys.readouterr().out
        assert "FAIL" not in out and out.count("PASS") >= 10

    def test_ntfp_outputs_and_determinism(self, tmp_path, capsys, monkeypatch):
        src = expcli.default_config_path("ntfp").read_text()
        cfgp = tmp_path / "ntfp.toml"
        cfgp.write_text(src.replace("gains = [1.0, 1.5, 2.0]", "gains = [1.5]")
                           .replace("planted_counts = [0, 1, 2]",
                                    "planted_counts = [1]"))
        rcs = []
        for name in ("a", "b"):
            rcs.append(cli_main(["ntfp", str(cfgp), "--out",
                                 str(tmp_path / name), "--seed", "0"]))
        capsys.readouterr()
        assert rcs == [0, 0]
        for f in ("endpoints.csv", "trajectories.csv", "config.json",
                  "manifest.json"):
            assert (tmp_path / "a" / f).exists()
        for f in ("endpoints.csv", "trajectories.csv", "config.json"):
            assert ((tmp_path / "a" / f).read_bytes()
                    == (tmp_path / "b" / f).read_bytes())
        manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
        assert manifest["version"] == expcli.gsntk.__version__
        assert manifest["seed"] == [0]
        assert len(manifest["config_hash"]) == 64

    def test_rank_regimes_workers_match_serial(self, tmp_path, capsys):
        src = expcli.default_config_path("rank_regimes").read_text()
        cfgp = tmp_path / "rr.toml"
        cfgp.write_text(src
                        .replace("gains = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0]",
                                 "gains = [0.5, 1.0, 1.5, 3.0]")
                        .replace("input_ranks = [1, 2, 4, 8, 16]",
                                 "input_ranks = [1, 4, 16]")
                        .replace("n_t = 25", "n_t = 12")
                        .replace("n_h = 32", "n_h = 16"))
        rc1 = cli_main(["rank-regimes", str(cfgp), "--out", str(tmp_path / "s"),
                        "--seed", "0"])
        rc2 = cli_main(["rank-regimes", str(cfgp), "--out", str(tmp_path / "p"),
                        "--seed", "0", "--workers", "2"])
        capsys.readouterr()
        assert rc1 in (0, 1) and rc2 == rc1
        assert ((tmp_path / "s" / "rank_regimes.csv").read_bytes()
                == (tmp_path / "p" / "rank_regimes.csv").read_bytes())
        header = (tmp_path / "s" / "rank_regimes.csv").read_text().splitlines()[0]
        assert header == "seed,family,gain,input_rank,view,method,value,censored"

    def test_transformer_rank_small(self, tmp_path, capsys):
        src = expcli.default_config_path("transformer_rank").read_text()
        desk, paper = src.split("[paper]")
        cfgp = tmp_path / "tr.toml"
        cfgp.write_text(desk
                        .replace("n_t = 30", "n_t = 8")
                        .replace("n_in_grid = [1, 4, 16, 64]",
                                 "n_in_grid = [1, 4]")
                        .replace("n_x_grid = [5, 10, 15]", "n_x_grid = [4]")
                        .replace("fourier_grid = [0, 2, 4, 8]",
                                 "fourier_grid = [0, 2]")
                        .replace("width_grid = [8, 16, 32]", "width_grid = [8]")
                        .replace("n_attn = 128", "n_attn = 32"))
        rc = cli_main(["transformer-rank", str(cfgp), "--out",
                       str(tmp_path / "tr"), "--seed", "0"])
        capsys.readouterr()
        assert rc in (0, 1)
        text = (tmp_path / "tr" / "transformer_rank.csv").read_text()
        assert text.splitlines()[0] == "seed,sweep,n_x,n_in,fourier,width,metric,value"
        assert "core_rank_bound" in text
        assert (tmp_path / "tr" / "transformer_modes.csv").exists()

    def test_core_alignment_small_writes_checkpoints(self, tmp_path, capsys):
        src = expcli.default_config_path("core_alignment").read_text()
        desk = src.split("[paper]")[0]
        cfgp = tmp_path / "ca.toml"
        cfgp.write_text(desk
                        .replace("n_h = 32", "n_h = 8")
                        .replace("n_x = 10", "n_x = 3")
                        .replace("n_t = 45", "n_t = 9")
                        .replace("phases = [15, 15, 15]", "phases = [3, 3, 3]")
                        .replace("iterations = 600", "iterations = 20")
                        .replace("checkpoint_every = 150", "checkpoint_every = 10")
                        .replace("top_modes = 3", "top_modes = 1"))
        rc = cli_main(["core-alignment", str(cfgp), "--out",
                       str(tmp_path / "ca"), "--seed", "0"])
        capsys.readouterr()
        assert rc in (0, 1)
        ckpts = sorted((tmp_path / "ca" / "checkpoints").glob("*.npz"))
        assert [p.name for p in ckpts] == ["seed0_iter000000.npz",
                                           "seed0_iter000010.npz",
                                           "seed0_iter000020.npz"]
        text = (tmp_path / "ca" / "core_alignment.csv").read_text()
        assert text.splitlines()[0] == "seed,checkpoint,metric,mode,value"
        assert (tmp_path / "ca" / "core_modes.csv").exists()

    def test_selfref_small_schema(self, tmp_path, capsys):
        src = expcli.default_config_path("selfref").read_text()
        desk = src.split("[paper]")[0]
        cfgp = tmp_path / "sr.toml"
        cfgp.write_text(desk
                        .replace("n_h = 32", "n_h = 8")
                        .replace("n_x = 10", "n_x = 3")
                        .replace("n_t = 45", "n_t = 9")
                        .replace("phases = [15, 15, 15]", "phases = [3, 3, 3]")
                        .replace("iterations = 2000", "iterations = 30")
                        .replace("log_every = 50", "log_every = 10")
                        .replace("n_points = 5", "n_points = 2"))
        rc = cli_main(["selfref", str(cfgp), "--out", str(tmp_path / "sr"),
                       "--seed", "0"])
        capsys.readouterr()
        assert rc in (0, 1)
        text = (tmp_path / "sr" / "selfref.csv").read_text()
        assert text.splitlines()[0] == ("seed,network,optimizer,iteration,"
                                        "metric,mode,value")
        assert "ntk_mode_alignment" in text and "response_pair_alignment" in text

    def test_seed_override_stamps_manifest(self, tmp_path, capsys):
        src = expcli.default_config_path("ntfp").read_text()
        cfgp = tmp_path / "ntfp.toml"
        cfgp.write_text(src.replace("gains = [1.0, 1.5, 2.0]", "gains = [1.5]")
                           .replace("planted_counts = [0, 1, 2]",
                                    "planted_counts = [0]"))
        rc = cli_main(["ntfp", str(cfgp), "--out", str(tmp_path / "o"),
                       "--seed", "3..4"])
        capsys.readouterr()
        assert rc == 0
        manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
        assert manifest["seed"] == [3, 4]
