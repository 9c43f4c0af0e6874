import json

import numpy as np
import pytest

from mlmcopt.cli import main
from mlmcopt.config import OUT_ENV, ConfigError, RunConfig, parse_assignment, parse_config, preset_values
from mlmcopt.experiment import (
    cross_section,
    empty_bundle,
    plot_files,
    run_estimate,
    run_experiment,
)

SMALL = {"m0": 4, "L_bar": 2, "n_kl": 50, "tau": 5e-3, "post_max": 200, "timing": False}


def small_config(tmp_path, **kw):
    return parse_config("problem1-desk", overrides={**SMALL, "out": str(tmp_path), **kw}, env={})


class TestParseConfig:
    def test_problem2_preset(self):
        cfg = parse_config("problem2", env={})
        assert (cfg.alpha, cfg.gamma, cfg.sigma2) == (1e-5, 0.0, 0.5)
        assert cfg.L_bar == 5

    def test_desk_presets(self):
        for name, tau in [("problem1-desk", 1e-3), ("problem2-desk", 1e-3), ("problem3-desk", 5e-4)]:
            cfg = parse_config(name, env={})
            assert cfg.L_bar == 3 and cfg.m0 == 8 and cfg.tau == tau
        assert parse_config("problem3-desk", env={}).reaction == "exp"

    def test_tau_override_changes_only_tau(self):
        a = parse_config("problem1-desk", env={}).to_dict()
        b = parse_config("problem1-desk", overrides={"tau": 3e-3}, env={}).to_dict()
        assert {k for k in a if a[k] != b[k]} == {"tau"}

    @pytest.mark.parametrize("key,value", [("gamma", -0.1), ("tau", 0), ("eta", 1.5), ("method", "bfgs"),
                                           ("n_init", 1), ("L_bar", -1)])
    def test_rejects_invalid(self, key, value):
        with pytest.raises(ConfigError) as info:
            parse_config("problem1-desk", overrides={key: value}, env={})
        assert info.value.key == key
        assert key in str(info.value)

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="colour"):
            parse_config(overrides={"colour": "red"}, env={})

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            preset_values("problem9")

    def test_type_error_names_key(self):
        with pytest.raises(ConfigError, match="k_max"):
            parse_config(overrides={"k_max": "many"}, env={})

    def test_env_out(self):
        assert parse_config(env={OUT_ENV: "/tmp/x"}).out == "/tmp/x"
        assert parse_config(overrides={"out": "y"}, env={OUT_ENV: "/tmp/x"}).out == "y"

    def test_json_file(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"preset": "problem2-desk", "seed": 7, "tau": 2e-3}))
        cfg = parse_config(path=path, env={})
        assert (cfg.seed, cfg.tau, cfg.gamma) == (7, 2e-3, 0.0)

    def test_toml_file_and_layering(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text('seed = 3\nmethod = "newton"\ntau = 2e-3\n')
        cfg = parse_config("problem1-desk", path, {"tau": 4e-3}, env={})
        assert (cfg.seed, cfg.method, cfg.tau, cfg.preset) == (3, "newton", 4e-3, "problem1-desk")

    def test_bad_file(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError):
            parse_config(path=path, env={})
        with pytest.raises(ConfigError):
            parse_config(path=tmp_path / "missing.json", env={})

    def test_string_overrides_coerced(self):
        cfg = parse_config(overrides=dict(parse_assignment(a) for a in ["seed=5", "timing=false", "tau=1e-2"]), env={})
        assert cfg.seed == 5 and cfg.timing is False and cfg.tau == 1e-2

    def test_assignment_syntax(self):
        with pytest.raises(ConfigError):
            parse_assignment("tau")

    def test_problem_roundtrip(self):
        cfg = parse_config("problem3-desk", env={})
        p = cfg.problem()
        assert p.reaction is not None and p.covariance.sigma2 == 0.5
        assert parse_config(overrides={"sigma2": 0.0}, env={}).problem().covariance is None

    def test_header_has_seed(self):
        assert RunConfig(seed=42).header()["seed"] == 42


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    return run_experiment(small_config(tmp_path_factory.mktemp("run")), write=True)


class TestRunExperiment:
    def test_converges(self, bundle):
        assert bundle.converged and bundle.fresh_norm <= bundle.config.tau

    def test_deterministic_bytes(self, bundle, tmp_path):
        again = run_experiment(small_config(tmp_path), write=False)
        # the out directory is part of the recorded config, so pin it
        again.config = bundle.config
        assert again.to_bytes() == bundle.to_bytes()

    def test_seed_changes_bytes(self, bundle, tmp_path):
        other = run_experiment(small_config(tmp_path, seed=1), write=False)
        assert other.to_bytes() != bundle.to_bytes()

    def test_files_written(self, bundle):
        from pathlib import Path

        out = Path(bundle.config.out)
        for name in ["table.csv", "trace.csv", "fields.csv", "summary.json", "convergence.csv",
                     "cross_section.csv", "variance.csv"]:
            text = (out / name).read_text()
            if name.endswith(".csv"):
                assert "# seed=0" in text.splitlines()

    def test_table_rows_carry_eps_and_counts(self, bundle):
        lines = [l for l in bundle.table_csv().splitlines() if not l.startswith("#")]
        assert lines[0].split(",")[:6] == ["index", "phase", "epsilon", "n0", "n1", "n2"]
        for row in lines[1:]:
            cells = row.split(",")
            assert float(cells[2]) > 0
            counts = [int(c) for c in cells[3:6]]
            assert all(a >= b for a, b in zip(counts, counts[1:]))

    def test_single_header_row(self, bundle):
        for name, text in plot_files(bundle).items():
            body = [l for l in text.splitlines() if not l.startswith("#")]
            assert not any(l.startswith("#") for l in body)

    def test_fields_post_hoc(self, bundle):
        assert bundle.post_samples >= 20
        assert np.all(bundle.var_state >= 0)
        assert "post_eps" in bundle.fields_csv()


class TestPlots:
    def _rows(self, text):
        lines = [l for l in text.splitlines() if not l.startswith("#")]
        return lines[0].split(","), np.array([[float(c) for c in l.split(",")] for l in lines[1:]])

    def test_contributions_sum_to_gradient(self, bundle):
        cols, data = self._rows(plot_files(bundle)["cross_section.csv"])
        parts = [cols.index(f"level{l}") for l in range(bundle.n_levels)] + [cols.index("penalty")]
        total = data[:, cols.index("gradient")]
        np.testing.assert_allclose(data[:, parts].sum(axis=1), total, rtol=0, atol=1e-12 * max(1, np.abs(total).max()))

    def test_level0_contribution_is_smooth(self, bundle):
        H = bundle.config.problem().hierarchy
        c0 = bundle.contributions[0]
        # full 2D field lies in the range of the prolongation from level 0
        P = np.column_stack([H.transfer_array(e, 0, H.L_bar) for e in np.eye(H.size(0))])
        coef, *_ = np.linalg.lstsq(P, c0, rcond=None)
        assert np.linalg.norm(P @ coef - c0) <= 1e-10 * np.linalg.norm(c0)
        # spectrum of the cross section: little energy above the level-0 Nyquist index
        m = H.m(H.L_bar)
        curve = cross_section(c0, m, H.dim)
        spec = np.abs(np.fft.rfft(curve)) ** 2
        assert spec[H.m(0) // 2 + 1:].sum() <= 0.05 * spec.sum()

    def test_empty_bundle_headers(self, tmp_path):
        b = empty_bundle(small_config(tmp_path))
        files = {**b.files(), **plot_files(b)}
        for name, text in files.items():
            if not name.endswith(".csv"):
                continue
            body = [l for l in text.splitlines() if not l.startswith("#")]
            assert len(body) == (1 if name != "fields.csv" else 1 + b.u.values.size)
            assert body[0]


class TestCommands:
    def test_estimate_writes(self, tmp_path):
        rep = run_estimate(small_config(tmp_path), 2e-2)
        assert rep.converged
        for name in ["estimate.csv", "gradient.csv", "frozen.txt"]:
            assert (tmp_path / name).exists()

    def test_main_estimate(self, tmp_path, capsys):
        code = main(["estimate", "--preset", "problem2-desk", "--set", "L_bar=1", "--set", "m0=4",
                     "--set", "n_kl=20", "--eps", "0.05", "--out", str(tmp_path)])
        assert code == 0
        assert "counts=" in capsys.readouterr().out

    def test_main_config_error(self, tmp_path, capsys):
        assert main(["estimate", "--preset", "problem1-desk", "--set", "gamma=-1", "--out", str(tmp_path)]) == 2
        assert "gamma" in capsys.readouterr().err

    def test_main_full_scale_guard(self, tmp_path, capsys):
        assert main(["optimize", "--preset", "problem1", "--out", str(tmp_path)]) == 2
        assert "--full-scale" in capsys.readouterr().err

    def test_main_optimize_not_converged(self, tmp_path):
        args = ["optimize", "--preset", "problem1-desk", "--out", str(tmp_path), "--no-timing", "--tau", "1e-9",
                *sum((["--set", f"{k}={v}"] for k, v in {"m0": 4, "L_bar": 1, "n_kl": 20, "k_max": 2,
                                                         "post_max": 30}.items()), [])]
        assert main(args) == 1
        assert (tmp_path / "trace.csv").exists()

    def test_main_calibrate(self, tmp_path, capsys):
        code = main(["calibrate", "--preset", "problem1-desk", "--set", "L_bar=1", "--set", "m0=4",
                     "--set", "n_kl=20", "--samples", "2", "--out", str(tmp_path)])
        assert code == 0
        assert "kappa=" in capsys.readouterr().out
        assert (tmp_path / "calibrate.csv").exists()

    def test_main_plots(self, tmp_path, capsys):
        code = main(["plots", "--preset", "problem1-desk", "--out", str(tmp_path), "--no-timing",
                     *sum((["--set", f"{k}={v}"] for k, v in SMALL.items() if k != "timing"), [])])
        assert code == 0
        assert (tmp_path / "cross_section.csv").exists()
        assert not (tmp_path / "trace.csv").exists()
