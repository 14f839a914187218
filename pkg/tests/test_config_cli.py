import csv
from pathlib import Path

import pytest

from rbprice.cli import main
from rbprice.config import ConfigError, load_config, parse_config, parse_mu
from rbprice.construction import ErrorMeasure, read_header
from rbprice.market_models import BS_BOX, HESTON_AMERICAN_BOX, Model, OptionType

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

TINY = """
model = black-scholes
option = american-put
mesh.resolution = 30
time.L = 6
train.grid = 2
train.N_max = {n_max}
train.measure = l2-true
test.count = 3
output.dir = {out}
"""


def tiny_config(tmp_path, n_max=2, extra=""):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY.format(n_max=n_max, out=tmp_path / "out") + extra)
    return str(path)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# -- configuration -------------------------------------------------------------------

@pytest.mark.parametrize("name", sorted(p.name for p in CONFIGS.glob("*.cfg")))
def test_shipped_configs_parse(name):
    cfg = load_config(CONFIGS / name)
    assert cfg.train_set()
    assert all(cfg.box.contains(p) for p in cfg.train_set())


def test_heston_config_values():
    cfg = load_config(CONFIGS / "heston-american.cfg")
    assert cfg.spec.model is Model.HESTON and cfg.spec.option_type is OptionType.AMERICAN_PUT
    assert cfg.resolution == (49, 97)
    assert cfg.box.active_names == ("gamma", "kappa")
    assert len(cfg.train_set()) == 49
    assert cfg.measure is ErrorMeasure.L2_TRUE
    assert cfg.box.lower == HESTON_AMERICAN_BOX.lower


def test_unknown_key_is_rejected():
    with pytest.raises(ConfigError) as info:
        parse_config("model = black-scholes\noption = american-put\nmesh.resolutoin = 5\n")
    assert info.value.key == "mesh.resolutoin"


@pytest.mark.parametrize("line,key", [
    ("time.L = ten", "time.L"),
    ("time.L = 0", "time.L"),
    ("mesh.resolution = 10, 10", "mesh.resolution"),
    ("train.measure = sup-norm", "train.measure"),
    ("time.theta = 0.5", "time.theta"),
    ("box.active = sigma, vol", "box.active"),
    ("box.default = 0.6, 0.0015, 0.05", "box.default"),
    ("box.lower = 0.6, 0.0014, 0.0475", "box"),
])
def test_bad_values_name_the_key(line, key):
    with pytest.raises(ConfigError) as info:
        parse_config(f"model = black-scholes\noption = american-put\n{line}\n")
    assert info.value.key == key
    assert key in str(info.value)


def test_missing_required_key():
    with pytest.raises(ConfigError) as info:
        parse_config("model = heston\n")
    assert info.value.key == "option"


def test_parse_mu_full_and_active():
    cfg = parse_config("model = black-scholes\noption = american-put\n")
    assert parse_mu("0.5, 0.0015, 0.05", cfg).vector.tolist() == [0.5, 0.0015, 0.05]
    cfg = parse_config("model = black-scholes\noption = american-put\nbox.active = sigma\n")
    p = parse_mu("0.48", cfg)
    assert p.vector[0] == 0.48 and p.vector[1] == BS_BOX.default[1]
    with pytest.raises(ConfigError):
        parse_mu("0.9, 0.0015, 0.05", cfg)
    with pytest.raises(ConfigError):
        parse_mu("0.5, 0.05", cfg)


# -- command line ---------------------------------------------------------------------

def test_detailed_solve_writes_trajectory(tmp_path, capsys):
    cfg = tiny_config(tmp_path)
    assert main(["detailed-solve", "--config", cfg, "--mu", "0.5, 0.0015, 0.05"]) == 0
    out = tmp_path / "out"
    assert len(read_rows(out / "U.csv")) == 1 + 7  # header plus L + 1 steps
    assert len(read_rows(out / "pdas_iterations.csv")) == 1 + 6
    summary = {r[0]: r[1] for r in read_rows(out / "summary.csv")[1:]}
    assert int(summary["max_pdas_iterations"]) <= 10
    assert float(summary["complementarity_product"]) < 1e-10


def test_mu_outside_box_exits_with_config_code(tmp_path, capsys):
    assert main(["detailed-solve", "--config", tiny_config(tmp_path), "--mu", "0.9, 0.0015, 0.05"]) == 2
    assert "--mu" in capsys.readouterr().err


def test_missing_config_file_exits_with_config_code(tmp_path):
    assert main(["train", "--config", str(tmp_path / "absent.cfg")]) == 2


def test_train_evaluate_inspect(tmp_path, capsys):
    cfg = tiny_config(tmp_path)
    basis = tmp_path / "b.rbb"
    assert main(["train", "--config", cfg, "--basis", str(basis)]) == 0
    head = read_header(basis)
    assert head["N_V"] <= 4 and head["N_W"] <= 2
    assert (tmp_path / "b.trace.csv").exists()
    assert main(["evaluate", "--config", cfg, "--basis", str(basis)]) == 0
    rows = read_rows(tmp_path / "out" / "evaluation.csv")
    assert len(rows) == 1 + 3
    assert main(["inspect-basis", str(basis)]) == 0
    text = capsys.readouterr().out
    assert "config_hash" in text and "k, mu, n_k" in text


def test_train_single_basis_function(tmp_path):
    cfg = tiny_config(tmp_path, n_max=1)
    basis = tmp_path / "one.rbb"
    assert main(["train", "--config", cfg, "--basis", str(basis)]) == 0
    head = read_header(basis)
    assert (head["N_V"], head["N_W"]) == (2, 1)


def test_hash_mismatch_exits_4(tmp_path, capsys):
    basis = tmp_path / "b.rbb"
    assert main(["train", "--config", tiny_config(tmp_path), "--basis", str(basis)]) == 0
    other = tmp_path / "other.cfg"
    other.write_text(TINY.format(n_max=2, out=tmp_path / "o").replace("resolution = 30", "resolution = 31"))
    assert main(["evaluate", "--config", str(other), "--basis", str(basis), "--no-detailed"]) == 4
    assert "hash" in capsys.readouterr().err


def test_unknown_study_is_rejected(tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["study", "no-such-study", "--config", tiny_config(tmp_path)])
    assert info.value.code == 2


def test_no_supremizers_logs_warning(tmp_path, caplog):
    assert main(["train", "--config", tiny_config(tmp_path), "--no-supremizers",
                 "--basis", str(tmp_path / "n.rbb")]) == 0
    assert "supremizers disabled" in caplog.text


def test_reruns_are_bit_identical(tmp_path):
    def run(tag):
        out = tmp_path / tag
        assert main(["study", "am-bs", "--config", tiny_config(tmp_path), "--out", str(out)]) == 0
        return out

    a, b = run("a"), run("b")
    names = sorted(p.name for p in a.glob("*.csv") if "timing" not in p.name)
    assert names == sorted(p.name for p in b.glob("*.csv") if "timing" not in p.name)
    assert names
    for name in names:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    assert (a / "am-bs.rbb").read_bytes() == (b / "am-bs.rbb").read_bytes()
