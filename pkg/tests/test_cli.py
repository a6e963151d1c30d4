import csv
import json

import pytest

from flucrel.cli import CHECKS, EXIT_CONFIG, EXIT_FAIL, EXIT_PASS, apply_overrides, main, parse_config
from flucrel.errors import ConfigInvalid


def base(**extra):
    doc = {"schema_version": 1, "process": {"name": "breathing_ou", "params": {}},
           "scheme": {"name": "canonical"}, "check": "jarzynski", "n": 2000, "h": 1e-2, "seed": 3}
    doc.update(extra)
    return doc


def write(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.mark.parametrize("doc,field", [
    (base(n=-5), "n"),
    (base(h="fast"), "h"),
    (base(colour="blue"), "colour"),
    ({"process": "breathing_ou", "check": "jarzynski"}, "schema_version"),
    (base(process={"name": "breathing_ou", "params": {"k2": 1.0}}), "process.params.k2"),
    (base(scheme={"name": "sideways"}), "scheme.name"),
    (base(scheme={"name": "complete_reversal"}, process={"name": "flux1d"}), "scheme.name"),
    (base(check="nope"), "check"),
    (base(horizons=[1.0, -2.0]), "horizons[1]"),
])
def test_config_errors_name_the_field(tmp_path, capsys, doc, field):
    code = main(["run", "--config", write(tmp_path, doc), "--out", str(tmp_path / "o")])
    assert code == EXIT_CONFIG
    assert field in capsys.readouterr().err


def test_missing_config_file(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "absent.json")]) == EXIT_CONFIG
    assert "--config" in capsys.readouterr().err


def test_catalog_json_examples_parse(capsys):
    assert main(["catalog", "--json"]) == EXIT_PASS
    doc = json.loads(capsys.readouterr().out)
    assert {c for c in doc["checks"]} == set(CHECKS)
    for proc in doc["processes"]:
        cfg = parse_config(proc["example_config"], need_check="check" in proc["example_config"])
        assert cfg.process == proc["name"]


def test_catalog_text_listing(capsys):
    assert main(["catalog"]) == EXIT_PASS
    out = capsys.readouterr().out
    assert "double_well:" in out and "checks:" in out


def test_overrides_descend_and_parse_json():
    doc = apply_overrides({"process": "linear"}, ["process.params.beta=2", "options.lags=[0.1, 0.2]",
                                                  "scheme.name=natural"])
    assert doc["process"] == {"name": "linear", "params": {"beta": 2}}
    assert doc["options"]["lags"] == [0.1, 0.2]
    assert doc["scheme"]["name"] == "natural"
    with pytest.raises(ConfigInvalid):
        apply_overrides({}, ["no_equals_sign"])


def test_run_writes_manifest_and_passes(tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["run", "--config", write(tmp_path, base()), "--out", str(out), "--workers", "2"])
    assert code == EXIT_PASS
    man = json.loads((out / "manifest.json").read_text())
    for key in ("config", "code_version", "seed", "wall_time_s", "verdicts", "files"):
        assert key in man
    assert man["verdicts"] == {"jarzynski": "pass"}
    assert man["config"]["workers"] == 2
    rec = json.loads((out / "estimates.jsonl").read_text().splitlines()[0])
    assert rec["n"] == 2000 and rec["seed"] == 3


def test_failed_verdict_exits_one(tmp_path, capsys):
    # a coarse step biases the Euler ensemble far beyond its statistical error
    doc = base(n=20_000, h=0.25, process={"name": "breathing_ou", "params": {"k1": 3.0}})
    code = main(["run", "--config", write(tmp_path, doc), "--out", str(tmp_path / "o")])
    assert code == EXIT_FAIL


def test_simulate_csv_layout(tmp_path):
    doc = base(n=3, check=None, options={"stride": 50})
    out = tmp_path / "sim"
    assert main(["simulate", "--config", write(tmp_path, doc), "--out", str(out)]) == EXIT_PASS
    with open(out / "paths.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["trajectory_index", "step", "t", "x_1"]
    # 100 steps at stride 50: steps 0, 50, 100 for each of three paths
    assert len(rows) == 1 + 3 * 3
    assert [r[1] for r in rows[1:4]] == ["0", "50", "100"]
