import json

import pytest

from lrsep.cli import main
from lrsep.config import ConfigError, derive_seed, parse_config, replica_rng
from lrsep.experiments import map_replicas, run_experiment, worker_count


def test_defaults():
    cfg = parse_config('experiment = "equilibrium-cf"')
    assert cfg.dim == 1 and cfg.alpha == 1.0 and cfg.n_ladder == [16]
    assert cfg.side(16) == 256 and cfg.radius(16) == 128
    assert cfg.observation_times() == [1.0]
    assert cfg.effective_cutoff() == pytest.approx(0.5)


def test_profile_table():
    cfg = parse_config('experiment = "hydro-limit"\n[profile]\npreset = "bump"\nwidth = 2\n')
    assert cfg.profile == "bump" and cfg.profile_params == {"width": 2.0}


def test_all_violations_reported():
    doc = 'experiment = "equilibrium-cf"\nalpha = 2.5\nn_ladder = [32, 16]\ncolour = 1\n'
    with pytest.raises(ConfigError) as exc:
        parse_config(doc)
    v = exc.value.violations
    assert len(v) == 3
    assert any(s.startswith("alpha:") and "(0, 2)" in s for s in v)
    assert any(s.startswith("n_ladder:") and "increasing" in s for s in v)
    assert any(s.startswith("colour:") for s in v)


@pytest.mark.parametrize("doc,key", [
    ('experiment = "nope"', "experiment"),
    ('experiment = "hydro-limit"', "profile"),
    ('experiment = "hydro-limit"\nprofile = "zigzag"', "profile.preset"),
    ('experiment = "equilibrium-cf"\ntimes = [2.0]', "times"),
    ('experiment = "equilibrium-cf"\ndim = 3', "dim"),
    ('experiment = "equilibrium-cf"\nreplicas = 0', "replicas"),
    ("experiment = ", "syntax"),
])
def test_single_violation(doc, key):
    with pytest.raises(ConfigError) as exc:
        parse_config(doc)
    assert exc.value.violations[0].startswith(key)


def test_digest_tracks_content():
    a = parse_config('experiment = "equilibrium-cf"\nseed = 1')
    b = parse_config('experiment = "equilibrium-cf"\nseed = 1')
    c = parse_config('experiment = "equilibrium-cf"\nseed = 2')
    assert a.digest() == b.digest() != c.digest()


def test_seed_derivation_has_no_collisions():
    seeds = {derive_seed(7, i) for i in range(10**6)}
    assert len(seeds) == 10**6
    assert derive_seed(7, 3, 0) != derive_seed(7, 3, 1)
    assert replica_rng(7, 3).random() == replica_rng(7, 3).random()


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("LRSEP_WORKERS", "3")
    assert worker_count() == 3 and worker_count(1) == 1
    monkeypatch.setenv("LRSEP_WORKERS", "many")
    with pytest.raises(ValueError):
        worker_count()


def test_map_replicas_order_and_threads():
    f = lambda i, rng: (i, rng.random())
    one = map_replicas(f, 40, 5, 0, workers=1)
    four = map_replicas(f, 40, 5, 0, workers=4)
    assert one == four and [r[0] for r in one] == list(range(40))


TRIVIAL = 'experiment = "martingale-check"\nreplicas = 1\nhorizon = 0.0\nn_ladder = [4]\n'


def test_trivial_run_passes(tmp_path):
    m = run_experiment(parse_config(TRIVIAL), tmp_path)
    assert m.verdict
    assert set(m.outputs) == {"martingale.csv", "report.json"}
    doc = json.loads((tmp_path / "report.json").read_text())
    assert set(doc) >= {"experiment", "statistic", "ci", "verdict"}


def test_runs_are_reproducible_across_workers(tmp_path):
    doc = 'experiment = "equilibrium-cf"\nreplicas = 20\nhorizon = 0.25\nn_ladder = [4, 8]\nseed = 11\n'
    cfg = parse_config(doc)
    a = run_experiment(cfg, tmp_path / "a", workers=1)
    b = run_experiment(cfg, tmp_path / "b", workers=1)
    c = run_experiment(cfg, tmp_path / "c", workers=3)
    assert a.outputs == b.outputs == c.outputs
    assert a.config_hash == c.config_hash and a.seeds == c.seeds


def test_cli_exit_codes(tmp_path, capsys):
    good = tmp_path / "good.toml"
    good.write_text(TRIVIAL)
    assert main(["validate", str(good)]) == 0
    assert main(["run", str(good), "-o", str(tmp_path / "out"), "-j", "1"]) == 0
    assert main(["report", str(tmp_path / "out" / "manifest.json")]) == 0
    bad = tmp_path / "bad.toml"
    bad.write_text('experiment = "equilibrium-cf"\nalpha = 2.5\nn_ladder = [32, 16]\n')
    capsys.readouterr()
    assert main(["validate", str(bad)]) == 2
    err = capsys.readouterr().err
    assert "alpha" in err and "n_ladder" in err
    assert main(["run", str(tmp_path / "missing.toml")]) == 2
    assert main(["list-presets"]) == 0
    assert "two-bump" in capsys.readouterr().out


def test_cli_failing_verdict(tmp_path):
    # an L1 threshold no finite system meets
    cfg = tmp_path / "f.toml"
    cfg.write_text('experiment = "hydro-limit"\nreplicas = 2\nhorizon = 0.1\nn_ladder = [8]\n'
                   'torus_factor = 8\nthreshold = 1e-9\nprofile = "bump"\n')
    assert main(["run", str(cfg), "-o", str(tmp_path / "o"), "-j", "1"]) == 1


def test_shipped_configs_validate():
    from pathlib import Path
    from lrsep.config import EXPERIMENTS, load_config
    root = Path(__file__).resolve().parents[1] / "configs"
    found = {load_config(p).experiment for p in root.glob("*.toml")}
    assert found == set(EXPERIMENTS)
