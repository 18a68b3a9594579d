from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import pytest

from bloch_caustics import report
from bloch_caustics.cli import FIGURES, main
from bloch_caustics.ensemble import OFFSET
from bloch_caustics.report import (
    ANALYSES,
    ConfigError,
    ExperimentConfig,
    emit_histogram,
    load_config,
    parse_config,
    run_experiment,
)

SMALL = """
sequence = "90(x)180(y)90(x)"
n_steps = 2000
analyses = {analyses}

[ensemble]
count = 5

[stability]
n_tf = 9

[bins]
average = 2
histogram = 5

[area]
n_points = 40
n_times = 11

[output]
stride = 50
"""


def small(tmp_path: Path, analyses=",".join(ANALYSES), name="exp.cfg") -> Path:
    p = tmp_path / name
    p.write_text(SMALL.format(analyses=analyses))
    return p


class TestConfig:
    def test_minimal(self):
        cfg = parse_config('sequence = "90(x)180(y)90(x)"')
        assert cfg == ExperimentConfig()
        assert cfg.w_range == (0.8, 0.9, 101)
        assert cfg.analyses == ANALYSES and cfg.n_steps == 100_000

    def test_offset(self):
        cfg = parse_config("[ensemble]\nkind = resonance_offset\n")
        assert cfg.ensemble_kind == OFFSET
        assert cfg.w_range == (0.4, 0.6, 201)

    def test_malformed_line(self):
        with pytest.raises(ConfigError) as exc:
            parse_config("# header\nsequence = 90(x)\nn_steps = many\n")
        assert exc.value.line == 3

    def test_unknown_key(self):
        with pytest.raises(ConfigError) as exc:
            parse_config("colour = blue")
        assert exc.value.line == 1
        assert parse_config("colour = blue", strict=False) == ExperimentConfig()

    def test_duplicate(self):
        with pytest.raises(ConfigError):
            parse_config("n_steps = 10\nn_steps = 20")

    def test_missing_equals(self):
        with pytest.raises(ConfigError):
            parse_config("n_steps 10")

    @pytest.mark.parametrize("text", [
        'sequence = "90(w)"',
        "analyses = trajectories, plots",
        "[ensemble]\nmin = 0.9\nmax = 0.8",
        "[stability]\nscheme = backward",
        "[canonical]\neta0 = 1.0",
        "n_steps =",
    ])
    def test_invalid_values(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_comments_and_quotes(self):
        cfg = parse_config('sequence = "90(x) 180(y) 90(x)"  # Levitt\n[stability]\nphi0 = auto\nepsilon = 1e-8\n')
        assert cfg.sequence == "90(x) 180(y) 90(x)"
        assert cfg.phi0 is None and cfg.epsilon == 1e-8

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.cfg")

    def test_echo(self):
        echo = ExperimentConfig().echo()
        assert echo["ensemble_count"] == 101 and echo["analyses"] == list(ANALYSES)


class TestHistogram:
    def test_all_equal(self):
        _, _, counts = emit_histogram(np.full(20, 0.3), 10)
        assert np.count_nonzero(counts) == 1 and counts.sum() == 20

    def test_counts_sum(self, rng):
        v = rng.random(137)
        lo, hi, counts = emit_histogram(v, 50)
        assert counts.sum() == 137
        assert lo[0] == 0 and hi[-1] == v.max()

    def test_zeros(self):
        lo, hi, counts = emit_histogram(np.zeros(4), 4)
        assert hi[-1] == 1.0 and counts[0] == 4

    def test_empty(self):
        with pytest.raises(ValueError):
            emit_histogram([], 3)


class TestRunExperiment:
    def test_trajectories_only(self, tmp_path):
        cfg = load_config(small(tmp_path, "trajectories"))
        rep = run_experiment(cfg, out_dir=tmp_path / "out")
        assert rep.ok
        assert set(rep.files) == {"trajectories", "summary"}
        names = sorted(p.name for p in (tmp_path / "out").iterdir())
        assert names == ["final_states.csv", "manifest.json", "summary.json", "trajectories.csv"]

    def test_full_small(self, tmp_path):
        cfg = load_config(small(tmp_path))
        rep = run_experiment(cfg, out_dir=tmp_path / "out", threads=2)
        assert rep.ok, rep.failures
        manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
        assert manifest["analyses"] == list(ANALYSES)
        for a in ANALYSES:
            assert manifest["files"][a], a
            assert all(len(h) == 64 for h in manifest["files"][a].values())
        s = rep.summary
        assert s["trajectories"]["max_norm_deviation"] <= 1e-9
        assert s["stability"]["h_eta"]["at_end"] < s["stability"]["h_eta"]["max"]
        assert abs(s["area"]["initial"] - math.pi / 2) < 1e-14
        assert len(s["canonical"]["hop_times"]) >= 1
        header = (tmp_path / "out" / "canonical.csv").read_text().splitlines()[0]
        assert header == "t,phi_unwrapped,phi_defined,eta,p_phi_branch"

    def test_json_only(self, tmp_path):
        cfg = parse_config(SMALL.format(analyses="width") + "formats = json\n")
        run_experiment(cfg, out_dir=tmp_path / "o")
        assert sorted(p.name for p in (tmp_path / "o").iterdir()) == ["manifest.json", "summary.json"]

    def test_invariant_failure(self, tmp_path, monkeypatch):
        monkeypatch.setattr(report, "NORM_TOL", -1.0)
        rep = run_experiment(load_config(small(tmp_path, "trajectories")), out_dir=tmp_path / "o")
        assert not rep.ok
        manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
        assert manifest["invariant_failures"]


class TestCLI:
    def test_validate(self, tmp_path, capsys):
        assert main(["validate", str(small(tmp_path))]) == 0
        assert "ok" in capsys.readouterr().out

    def test_validate_bad(self, tmp_path, capsys):
        p = tmp_path / "bad.cfg"
        p.write_text("n_steps = many\n")
        assert main(["validate", str(p)]) == 1
        assert "line 1" in capsys.readouterr().err

    def test_run(self, tmp_path):
        out = tmp_path / "out"
        assert main(["run", str(small(tmp_path, "trajectories,width")), "--out-dir", str(out)]) == 0
        assert (out / "width.csv").exists()

    def test_run_missing(self, tmp_path):
        assert main(["run", str(tmp_path / "missing.cfg")]) == 1

    def test_threads(self, tmp_path):
        assert main(["run", str(small(tmp_path)), "--threads", "0"]) == 1

    def test_invariant_exit(self, tmp_path, monkeypatch):
        monkeypatch.setattr(report, "ENERGY_TOL", -1.0)
        assert main(["run", str(small(tmp_path, "trajectories")), "--out-dir", str(tmp_path / "o")]) == 2

    def test_figures(self):
        assert set(FIGURES) == {"fig1a", "fig1b", "fig2", "fig3", "fig4", "fig5", "fig6", "fig7"}

    def test_deterministic(self, tmp_path):
        cfg = small(tmp_path)
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["run", str(cfg), "--out-dir", str(a), "--threads", "1"]) == 0
        assert main(["run", str(cfg), "--out-dir", str(b), "--threads", "3"]) == 0
        files = sorted(p.name for p in a.iterdir())
        assert files == sorted(p.name for p in b.iterdir())
        for name in files:
            assert (a / name).read_bytes() == (b / name).read_bytes(), name
