import json
import subprocess
import sys

import pytest

from sdcuda.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, EXIT_STAGE, main
from sdcuda.config import ConfigError, loads, normalize, validate_config
from sdcuda.pipeline import STAGE_DIRS, STAGES, Pipeline, StageError

TINY = """
[phantom]
dims = [6, 16, 16]
volumes_per_domain = 2
heldout = 1
structures = [1, 2]
radius = [2.0, 4.0]
foreground_fraction = [0.02, 0.5]

[translation]
steps = 3
channels = [4, 8, 8]
d_k = 8

[selftrain]
epochs = 2
batch_size = 256
"""


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text(TINY)
    return path


def _files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name not in ("manifest.json", "config.toml", "config.json") or
            p.is_file() and p.parent.name == "data"}


def test_empty_config_gets_defaults():
    cfg = loads("")
    policy = cfg.policy(3)
    for c in (1, 2):
        p = policy[c]
        assert (p.mode, p.tau, p.alpha, p.beta) == ("both", 0.3, 0.6, 1.4)
    assert cfg.translation["patch"] == 2 and cfg.selftrain["lr"] == 1e-2


def test_normalized_config_is_fixed_point(tiny):
    cfg = validate_config(tiny)
    again = loads(cfg.to_toml())
    assert again.to_dict() == cfg.to_dict()
    assert loads(again.to_toml()).to_toml() == again.to_toml()


def test_unknown_key_suggestion():
    with pytest.raises(ConfigError, match="did you mean 'alpha'"):
        loads("[refinement]\nalhpa = 0.5\n")
    with pytest.raises(ConfigError, match="unknown key 'selftrian'"):
        loads("[selftrian]\n")


def test_beta_below_alpha_names_class():
    with pytest.raises(ConfigError, match=r"class 2: need 0 < alpha < beta"):
        loads("[refinement.classes.2]\nalpha = 1.4\nbeta = 0.6\n")


@pytest.mark.parametrize("text, match", [
    ("[refinement]\ntau = 1.5\n", "tau"),
    ("[refinement]\nmode = 'all'\n", "mode"),
    ("[refinement.classes.5]\n", "class not in dataset"),
    ("[selftrain]\nepochs = 'ten'\n", "selftrain.epochs"),
    ("[phantom]\n[data]\ndir = 'x'\n", "either"),
    ("[translation]\npatch = 3\n", "divisible"),
    ("[run]\nworkers = 0\n", "workers"),
    ("x = 1\n", "top level"),
    ("[run\n", "cannot parse"),
])
def test_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        loads(text)


def test_per_class_override():
    cfg = loads("[refinement]\ntau = 0.5\n[refinement.classes.1]\nmode = 'none'\n")
    pol = cfg.policy(3)
    assert pol[1].mode == "none" and pol[1].tau == 0.5
    assert pol[2].mode == "both"


def test_with_seed_sets_every_seed():
    cfg = loads("").with_seed(7)
    assert cfg.phantom["seed"] == cfg.translation["seed"] == cfg.selftrain["seed"] == 7


def test_cli_config_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[refinement.classes.1]\nalpha = 1.4\nbeta = 0.6\n")
    assert main(["refine", "--config", str(bad), "--out", str(tmp_path / "r")]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "refine" in err and "class 1" in err and "alpha < beta" in err
    bad.write_text("[refinement]\nalhpa = 1\n")
    assert main(["pipeline", "--config", str(bad)]) == EXIT_CONFIG
    assert "did you mean 'alpha'" in capsys.readouterr().err
    assert main(["pipeline", "--config", str(tmp_path / "missing.toml")]) == EXIT_CONFIG


def test_cli_missing_upstream_exit_3(tmp_path, capsys):
    assert main(["train-teacher", "--out", str(tmp_path / "r")]) == EXIT_DATA
    assert "stage train-teacher" in capsys.readouterr().err


def test_cli_bad_data_dir_exit_3(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text(f"[data]\ndir = '{(tmp_path / 'nothing').as_posix()}'\n")
    assert main(["phantom-gen", "--config", str(cfg), "--out", str(tmp_path / "r")]) == EXIT_DATA
    assert "nothing" in capsys.readouterr().err


def test_stage_failure_exit_4(tiny, tmp_path, monkeypatch, capsys):
    out = tmp_path / "run"
    assert main(["phantom-gen", "--config", str(tiny), "--out", str(out)]) == EXIT_OK

    def boom(self, d):
        raise FloatingPointError("diverged")

    monkeypatch.setattr(Pipeline, "_train_translation", boom)
    assert main(["train-translation", "--config", str(tiny), "--out", str(out)]) == EXIT_STAGE
    assert "stage train-translation" in capsys.readouterr().err


def test_missing_declared_artifact_is_failure(tiny, tmp_path, monkeypatch):
    pipe = Pipeline(validate_config(tiny), tmp_path / "run")
    monkeypatch.setattr(Pipeline, "_phantom_gen", lambda self, d: [d / "never.svol"])
    with pytest.raises(StageError, match="never.svol"):
        pipe.run_stage("phantom-gen")


def test_pipeline_equals_stagewise_and_is_deterministic(tiny, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["pipeline", "--config", str(tiny), "--out", str(a)]) == EXIT_OK
    for stage in STAGES:
        assert main([stage, "--config", str(tiny), "--out", str(b)]) == EXIT_OK
    fa, fb = _files(a), _files(b)
    assert fa.keys() == fb.keys() and fa == fb
    for d in set(STAGE_DIRS.values()):
        assert (a / d).is_dir()
    metrics = json.loads((a / "evaluate" / "metrics.json").read_text())
    assert {"teacher", "student"} <= metrics.keys()
    assert list((a / "evaluate").glob("profile_student_*.csv"))
    assert (a / "config.toml").exists()


def test_seed_override_changes_outputs(tiny, tmp_path):
    main(["phantom-gen", "--config", str(tiny), "--out", str(tmp_path / "a")])
    main(["phantom-gen", "--config", str(tiny), "--out", str(tmp_path / "b"), "--seed", "5"])
    img = "data/target_000_image.svol"
    assert (tmp_path / "a" / img).read_bytes() != (tmp_path / "b" / img).read_bytes()
    echoed = validate_config(tmp_path / "b" / "config.toml")
    assert echoed.selftrain["seed"] == 5


def test_resume_semantics(tiny, tmp_path, caplog):
    out = tmp_path / "run"
    args = ["pipeline", "--config", str(tiny), "--out", str(out), "--resume"]
    assert main(args) == EXIT_OK
    before = _files(out)
    cfg = normalize({**validate_config(tiny).to_dict(), "run": {"out": str(out), "workers": 1}})

    pipe = Pipeline(cfg)
    assert pipe.run_all(resume=True) == []
    (out / "refined" / "refined_000.svol").unlink()
    pipe = Pipeline(cfg)
    assert pipe.run_all(resume=True) == ["refine", "train-student", "evaluate"]
    assert _files(out) == before

    (out / "evaluate" / "metrics.json").unlink()
    pipe = Pipeline(cfg)
    assert pipe.run_all(resume=True) == ["evaluate"]

    # a changed refinement section invalidates refine and everything after it
    d = cfg.to_dict()
    d["refinement"]["tau"] = 0.5
    pipe = Pipeline(normalize(d))
    assert pipe.run_all(resume=True) == ["refine", "train-student", "evaluate"]


def test_refine_mode_none_is_identity(tiny, tmp_path):
    out = tmp_path / "run"
    for stage in STAGES[:5]:
        assert main([stage, "--config", str(tiny), "--out", str(out)]) == EXIT_OK
    tiny.write_text(TINY + "\n[refinement]\nmode = 'none'\n")
    assert main(["refine", "--config", str(tiny), "--out", str(out)]) == EXIT_OK
    for i in range(2):
        assert (out / "pseudo" / f"pseudo_{i:03d}.svol").read_bytes() == \
            (out / "refined" / f"refined_{i:03d}.svol").read_bytes()
    report = json.loads((out / "refined" / "report.json").read_text())
    assert all(c["added"] == c["removed"] == 0 for v in report["volumes"] for c in v.values())


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "sdcuda", "refine", "--out", str(tmp_path / "x")],
                       capture_output=True, text=True, env={"SDC_UDA_LOG": "error", "PATH": ""})
    assert r.returncode == EXIT_DATA
    assert "stage refine" in r.stderr


def test_run_pipeline_in_memory(tmp_path):
    from sdcuda.phantom import generate
    from sdcuda.pipeline import run_pipeline

    cfg = loads(TINY)
    pair = generate(cfg.phantom_config())
    student, run, report = run_pipeline(pair, cfg, tmp_path / "run")
    assert student.num_classes == 3
    assert (run / "input" / "manifest.json").exists()
    assert set(report) == {"teacher", "policy", "volumes"} and len(report["volumes"]) == len(pair.target)
