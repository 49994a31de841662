"""TOML run-configuration parsing and validation."""

from pathlib import Path

import pytest

from shockcell.config import ConfigError, RunConfig, load_config
from shockcell.shapeopt import DEFAULT_MATERIAL

FULL = """
[material]
lam = 5.0e6
mu = 2.0e6

[mesher]
resolution = 32

[contact]
dhat = 1e-4
kappa = 5e7

[solver]
tol_grad = 1e-3
tol_constraint = 1e-9
penalty_w0 = 2e4
max_newton = 150

[objective]
sigma_target = 7000.0
eps_max = 0.4
n_samples = 4
shear_weight = 2.0
shear_threshold = 0.08

[sweep]
topologies = ["chi", "rhomboid"]
targets = [500.0, 5000.0]
eps_stop = 0.6
max_iter = 30
jobs = 3

[run]
out_dir = "out/demo"
seed = 7
trace = true
"""


def _write(tmp_path, text):
    path = tmp_path / "run.toml"
    path.write_text(text)
    return path


def test_defaults_without_file():
    cfg = load_config(None, None)
    assert cfg.material == DEFAULT_MATERIAL
    assert cfg.resolution == 24
    assert cfg.dhat is None and cfg.kappa is None and cfg.tol_grad is None
    assert cfg.eps_max == 0.3 and cfg.n_samples == 5
    assert cfg.out_dir == Path("runs") and cfg.jobs == 1 and not cfg.trace
    s = cfg.settings()
    assert s.penalty_w0 == 1e4 and s.max_newton == 200


def test_full_file(tmp_path):
    cfg = load_config(_write(tmp_path, FULL))
    assert cfg.material.lam == 5.0e6 and cfg.material.mu == 2.0e6
    assert cfg.resolution == 32
    assert cfg.dhat == 1e-4 and cfg.kappa == 5e7
    assert cfg.tol_grad == 1e-3 and cfg.tol_constraint == 1e-9
    assert cfg.penalty_w0 == 2e4 and cfg.max_newton == 150
    assert cfg.sigma_target == 7000.0 and cfg.eps_max == 0.4
    assert cfg.topologies == ("chi", "rhomboid")
    assert cfg.targets == (500.0, 5000.0)
    assert cfg.eps_stop == 0.6 and cfg.max_iter == 30 and cfg.jobs == 3
    assert cfg.out_dir == Path("out/demo") and cfg.seed == 7 and cfg.trace

    s = cfg.settings()
    assert s.dhat == 1e-4 and s.kappa == 5e7 and s.tol_grad == 1e-3

    spec = cfg.objective()
    assert spec.sigma_target == 7000.0
    assert spec.samples == (0.1, 0.2, 0.3, 0.4)
    assert spec.shear_weight == 2.0 and spec.shear_threshold == 0.08


def test_objective_requires_target():
    with pytest.raises(ConfigError, match="sigma_target"):
        RunConfig().objective()


def test_overrides_win(tmp_path):
    path = _write(tmp_path, FULL)
    cfg = load_config(path, {"resolution": 48, "out_dir": Path("elsewhere"),
                             "trace": None})
    assert cfg.resolution == 48
    assert cfg.out_dir == Path("elsewhere")
    assert cfg.trace  # None override leaves the file value alone
    with pytest.raises(ConfigError, match="unknown override"):
        load_config(path, {"resolutoin": 48})


def test_missing_and_malformed(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.toml")
    with pytest.raises(ConfigError, match="malformed"):
        load_config(_write(tmp_path, "this is [not toml"))


@pytest.mark.parametrize("text,match", [
    ("[widgets]\nx = 1\n", "unknown config section"),
    ("[material]\nrho = 1.0\n", "unknown key"),
    ("[material]\nmu = -1.0\n", "positive"),
    ("[mesher]\nresolution = 0\n", "positive"),
    ("[objective]\neps_max = 0.05\n", "eps_max"),
    ("[objective]\neps_max = 1.0\n", "eps_max"),
    ("[objective]\nshear_weight = -0.5\n", "non-negative"),
    ("[sweep]\ntopologies = []\n", "nonempty"),
    ("[sweep]\ntopologies = [\"hexagon\"]\n", "unknown topology"),
    ("[sweep]\ntargets = [0.0]\n", "positive"),
    ("[sweep]\nmax_iter = -1\n", "non-negative"),
    ("[run]\ntrace = \"yes\"\n", "boolean"),
])
def test_rejects_bad_values(tmp_path, text, match):
    with pytest.raises(ConfigError, match=match):
        load_config(_write(tmp_path, text))


def test_zero_shear_weight_allowed(tmp_path):
    cfg = load_config(_write(tmp_path, "[objective]\nshear_weight = 0.0\n"))
    assert cfg.shear_weight == 0.0
