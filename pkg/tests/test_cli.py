"""Command-line surface: exit codes, artifacts, and config precedence."""

import json

import numpy as np
import pytest

from otsteg import cli
from otsteg import train as tn
from otsteg.core import load_image


def run(*argv) -> int:
    return cli.main(list(argv))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A tiny dataset on disk plus a 2-epoch trained model."""
    root = tmp_path_factory.mktemp("cliws")
    data = root / "data"
    tn.write_synthetic_dataset(data, count=4, side=16)
    (root / "train.cfg").write_text(
        "# toy setup\n"
        "\n"
        "epochs = 2\n"
        "batch = 2\n"
        "patch_size = 16\n"
        "base_width = 4\n"
        "mlp_hidden = 4\n"
    )
    out = root / "run"
    code = run("train", "--data", str(data), "--out-dir", str(out),
               "--config", str(root / "train.cfg"))
    assert code == cli.EXIT_OK
    return root


def model_path(workspace):
    return workspace / "run" / "model.stgo"


# --- config plumbing -----------------------------------------------------------


def test_parse_config_file(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# comment\n\nepochs=3\n seed = 7 \n")
    assert cli.parse_config_file(path) == {"epochs": "3", "seed": "7"}


def test_parse_config_file_malformed(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("epochs\n")
    with pytest.raises(cli.ConfigError):
        cli.parse_config_file(path)


def test_resolve_precedence(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("epochs=3\nbatch=8\n")
    cfg, resolved = cli.resolve_train_config(path, {"epochs": "5"})
    assert cfg.epochs == 5  # flag beats file
    assert cfg.batch == 8  # file beats default
    assert cfg.seed == 0  # default survives
    assert resolved["epochs"] == "5"
    assert resolved["use_mcot"] == "true"


def test_resolve_rejects_unknown_key(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("learning_rate=0.1\n")
    with pytest.raises(cli.ConfigError):
        cli.resolve_train_config(path, {})


def test_resolve_rejects_bad_value():
    with pytest.raises(cli.ConfigError):
        cli.resolve_train_config(None, {"epochs": "three"})
    with pytest.raises(cli.ConfigError):
        cli.resolve_train_config(None, {"patch_size": "15"})


# --- train ------------------------------------------------------------------------


def test_train_artifacts(workspace):
    out = workspace / "run"
    assert (out / "metrics.csv").exists()
    assert (out / "model.stgo").exists()
    manifest = (out / "manifest.txt").read_text()
    assert manifest.startswith("command=train\n")
    assert "epochs=2\n" in manifest
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == ",".join(tn.CSV_COLUMNS)
    assert len(lines) == 3


def test_train_reruns_are_byte_identical(workspace, tmp_path):
    out2 = tmp_path / "run2"
    code = run("train", "--data", str(workspace / "data"), "--out-dir", str(out2),
               "--config", str(workspace / "train.cfg"))
    assert code == cli.EXIT_OK
    assert (out2 / "metrics.csv").read_bytes() == \
        (workspace / "run" / "metrics.csv").read_bytes()
    assert (out2 / "model.stgo").read_bytes() == model_path(workspace).read_bytes()


def test_train_empty_dataset(tmp_path):
    empty = tmp_path / "none"
    empty.mkdir()
    assert run("train", "--data", str(empty), "--out-dir", str(tmp_path / "o")) == 2


def test_train_unknown_config_key(workspace, tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("momentum=0.9\n")
    code = run("train", "--data", str(workspace / "data"),
               "--out-dir", str(tmp_path / "o"), "--config", str(bad))
    assert code == 2


def test_train_resume_continues_numbering(workspace, tmp_path):
    out = tmp_path / "resumed"
    code = run("train", "--data", str(workspace / "data"), "--out-dir", str(out),
               "--config", str(workspace / "train.cfg"),
               "--resume", str(model_path(workspace)))
    assert code == cli.EXIT_OK
    lines = (out / "metrics.csv").read_text().splitlines()
    assert [row.split(",")[0] for row in lines[1:]] == ["2", "3"]


def test_train_resume_arch_mismatch(workspace, tmp_path):
    code = run("train", "--data", str(workspace / "data"),
               "--out-dir", str(tmp_path / "o"),
               "--config", str(workspace / "train.cfg"), "--base-width", "8",
               "--resume", str(model_path(workspace)))
    assert code == 2


# --- hide and reveal ------------------------------------------------------------


def test_hide_reveal_round_trip(workspace, tmp_path):
    data = workspace / "data"
    cover = data / "synthetic_000.ppm"
    secret = data / "synthetic_001.ppm"
    stego = tmp_path / "stego.ppm"
    key = tmp_path / "stego.key"
    code = run("hide", "--cover", str(cover), "--secret", str(secret),
               "--model", str(model_path(workspace)),
               "--out-stego", str(stego), "--out-key", str(key))
    assert code == cli.EXIT_OK
    assert stego.exists() and key.exists()
    report = json.loads((tmp_path / "stego.ppm.report.json").read_text())
    assert set(report) == {"psnr_y", "ssim", "mae", "rmse"}
    manifest = (tmp_path / "stego.ppm.manifest.txt").read_text()
    assert manifest.startswith("command=hide\n")

    out = tmp_path / "rec.ppm"
    code = run("reveal", "--stego", str(stego), "--key", str(key),
               "--model", str(model_path(workspace)),
               "--out", str(out), "--secret", str(secret))
    assert code == cli.EXIT_OK
    assert out.exists()
    score = json.loads((tmp_path / "rec.ppm.report.json").read_text())
    assert score["psnr_y"] > 0


def test_hide_is_idempotent(workspace, tmp_path):
    data = workspace / "data"
    args = ["hide", "--cover", str(data / "synthetic_000.ppm"),
            "--secret", str(data / "synthetic_001.ppm"),
            "--model", str(model_path(workspace))]
    a = tmp_path / "a.ppm"
    b = tmp_path / "b.ppm"
    assert run(*args, "--out-stego", str(a), "--out-key", str(tmp_path / "a.key")) == 0
    assert run(*args, "--out-stego", str(b), "--out-key", str(tmp_path / "b.key")) == 0
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "a.key").read_bytes() == (tmp_path / "b.key").read_bytes()


def test_hide_exact_requires_out_key(workspace, tmp_path):
    data = workspace / "data"
    code = run("hide", "--cover", str(data / "synthetic_000.ppm"),
               "--secret", str(data / "synthetic_001.ppm"),
               "--model", str(model_path(workspace)),
               "--out-stego", str(tmp_path / "s.ppm"))
    assert code == 2


def test_hide_size_mismatch(workspace, tmp_path):
    big = tmp_path / "big"
    tn.write_synthetic_dataset(big, count=2, side=32)
    code = run("hide", "--cover", str(big / "synthetic_000.ppm"),
               "--secret", str(big / "synthetic_001.ppm"),
               "--model", str(model_path(workspace)),
               "--out-stego", str(tmp_path / "s.ppm"),
               "--out-key", str(tmp_path / "s.key"))
    assert code == 2


def test_hide_missing_cover_is_io_error(workspace, tmp_path):
    data = workspace / "data"
    code = run("hide", "--cover", str(tmp_path / "absent.ppm"),
               "--secret", str(data / "synthetic_001.ppm"),
               "--model", str(model_path(workspace)),
               "--out-stego", str(tmp_path / "s.ppm"),
               "--out-key", str(tmp_path / "s.key"))
    assert code == 4


def test_hide_entropic_rejects_key_export(workspace, tmp_path):
    data = workspace / "data"
    code = run("hide", "--cover", str(data / "synthetic_000.ppm"),
               "--secret", str(data / "synthetic_001.ppm"),
               "--model", str(model_path(workspace)), "--mode", "entropic",
               "--epsilon", "0.5",
               "--out-stego", str(tmp_path / "s.ppm"),
               "--out-key", str(tmp_path / "s.key"))
    assert code == 2


def test_hide_entropic_needs_epsilon(workspace, tmp_path):
    data = workspace / "data"
    code = run("hide", "--cover", str(data / "synthetic_000.ppm"),
               "--secret", str(data / "synthetic_001.ppm"),
               "--model", str(model_path(workspace)), "--mode", "entropic",
               "--out-stego", str(tmp_path / "s.ppm"))
    assert code == 2


def test_hide_entropic_runs(workspace, tmp_path):
    data = workspace / "data"
    stego = tmp_path / "s.ppm"
    code = run("hide", "--cover", str(data / "synthetic_000.ppm"),
               "--secret", str(data / "synthetic_001.ppm"),
               "--model", str(model_path(workspace)), "--mode", "entropic",
               "--epsilon", "0.5", "--out-stego", str(stego))
    assert code == cli.EXIT_OK
    assert stego.exists()


def test_reveal_truncated_key(workspace, tmp_path):
    data = workspace / "data"
    stego = tmp_path / "s.ppm"
    key = tmp_path / "s.key"
    assert run("hide", "--cover", str(data / "synthetic_000.ppm"),
               "--secret", str(data / "synthetic_001.ppm"),
               "--model", str(model_path(workspace)),
               "--out-stego", str(stego), "--out-key", str(key)) == 0
    key.write_bytes(key.read_bytes()[:-3])
    code = run("reveal", "--stego", str(stego), "--key", str(key),
               "--model", str(model_path(workspace)), "--out", str(tmp_path / "r.ppm"))
    assert code == 2


def test_reveal_key_model_mismatch(workspace, tmp_path):
    # A key solved for a 2-point problem cannot drive the model's bridge.
    (tmp_path / "x.txt").write_text("0.0\n2.0\n")
    (tmp_path / "y.txt").write_text("1.0\n3.0\n")
    key = tmp_path / "tiny.key"
    assert run("solve-ot", "--x-file", str(tmp_path / "x.txt"),
               "--y-file", str(tmp_path / "y.txt"), "--out-key", str(key)) == 0
    data = workspace / "data"
    stego = tmp_path / "s.ppm"
    assert run("hide", "--cover", str(data / "synthetic_000.ppm"),
               "--secret", str(data / "synthetic_001.ppm"),
               "--model", str(model_path(workspace)),
               "--out-stego", str(stego), "--out-key", str(tmp_path / "s.key")) == 0
    code = run("reveal", "--stego", str(stego), "--key", str(key),
               "--model", str(model_path(workspace)), "--out", str(tmp_path / "r.ppm"))
    assert code == 3


def test_reveal_mcot_model_requires_key(workspace, tmp_path):
    data = workspace / "data"
    stego = tmp_path / "s.ppm"
    assert run("hide", "--cover", str(data / "synthetic_000.ppm"),
               "--secret", str(data / "synthetic_001.ppm"),
               "--model", str(model_path(workspace)),
               "--out-stego", str(stego), "--out-key", str(tmp_path / "s.key")) == 0
    code = run("reveal", "--stego", str(stego),
               "--model", str(model_path(workspace)), "--out", str(tmp_path / "r.ppm"))
    assert code == 2


def test_reveal_without_secret_omits_report(workspace, tmp_path):
    data = workspace / "data"
    stego = tmp_path / "s.ppm"
    key = tmp_path / "s.key"
    assert run("hide", "--cover", str(data / "synthetic_000.ppm"),
               "--secret", str(data / "synthetic_001.ppm"),
               "--model", str(model_path(workspace)),
               "--out-stego", str(stego), "--out-key", str(key)) == 0
    out = tmp_path / "r.ppm"
    assert run("reveal", "--stego", str(stego), "--key", str(key),
               "--model", str(model_path(workspace)), "--out", str(out)) == 0
    assert out.exists()
    assert not (tmp_path / "r.ppm.report.json").exists()


# --- solve-ot ----------------------------------------------------------------------


def test_solve_ot_prints_cost(tmp_path, capsys):
    (tmp_path / "x.txt").write_text("0.0\n2.0\n")
    (tmp_path / "y.txt").write_text("1.0\n3.0\n")
    code = run("solve-ot", "--x-file", str(tmp_path / "x.txt"),
               "--y-file", str(tmp_path / "y.txt"))
    assert code == cli.EXIT_OK
    out = capsys.readouterr().out
    assert "total_cost=1.0" in out


def test_solve_ot_exact_equals_brute(tmp_path, capsys):
    from otsteg.core import SeededRng

    rng = SeededRng(6)
    (tmp_path / "x.txt").write_text("\n".join(repr(float(v)) for v in rng.normals(6)))
    (tmp_path / "y.txt").write_text("\n".join(repr(float(v)) for v in rng.normals(6)))
    costs = []
    for solver in ("exact", "brute"):
        assert run("solve-ot", "--x-file", str(tmp_path / "x.txt"),
                   "--y-file", str(tmp_path / "y.txt"), "--solver", solver) == 0
        costs.append(capsys.readouterr().out.strip())
    assert costs[0] == costs[1]


def test_solve_ot_brute_size_guard(tmp_path):
    points = "\n".join(str(float(i)) for i in range(9))
    (tmp_path / "x.txt").write_text(points)
    (tmp_path / "y.txt").write_text(points)
    code = run("solve-ot", "--x-file", str(tmp_path / "x.txt"),
               "--y-file", str(tmp_path / "y.txt"), "--solver", "brute")
    assert code == 2


def test_solve_ot_malformed_points(tmp_path):
    (tmp_path / "x.txt").write_text("1.0\nbanana\n")
    (tmp_path / "y.txt").write_text("1.0\n2.0\n")
    code = run("solve-ot", "--x-file", str(tmp_path / "x.txt"),
               "--y-file", str(tmp_path / "y.txt"))
    assert code == 2


def test_solve_ot_rejects_two_reals_per_line(tmp_path):
    (tmp_path / "x.txt").write_text("1.0 2.0\n")
    (tmp_path / "y.txt").write_text("1.0\n2.0\n")
    code = run("solve-ot", "--x-file", str(tmp_path / "x.txt"),
               "--y-file", str(tmp_path / "y.txt"))
    assert code == 2


def test_solve_ot_size_mismatch(tmp_path):
    (tmp_path / "x.txt").write_text("1.0\n2.0\n3.0\n")
    (tmp_path / "y.txt").write_text("1.0\n2.0\n")
    code = run("solve-ot", "--x-file", str(tmp_path / "x.txt"),
               "--y-file", str(tmp_path / "y.txt"))
    assert code == 2


def test_solve_ot_entropic_needs_epsilon(tmp_path):
    (tmp_path / "x.txt").write_text("1.0\n2.0\n")
    (tmp_path / "y.txt").write_text("1.0\n2.0\n")
    code = run("solve-ot", "--x-file", str(tmp_path / "x.txt"),
               "--y-file", str(tmp_path / "y.txt"), "--solver", "entropic")
    assert code == 2


def test_solve_ot_writes_plan(tmp_path):
    (tmp_path / "x.txt").write_text("0.0\n2.0\n")
    (tmp_path / "y.txt").write_text("1.0\n3.0\n")
    plan = tmp_path / "plan.csv"
    assert run("solve-ot", "--x-file", str(tmp_path / "x.txt"),
               "--y-file", str(tmp_path / "y.txt"), "--out-plan", str(plan)) == 0
    lines = plan.read_text().splitlines()
    assert lines == ["source,target", "0,0", "1,1"]
    assert (tmp_path / "plan.csv.manifest.txt").exists()


# --- ablate and bench -----------------------------------------------------------------


def test_ablate_zero_seeds(workspace, tmp_path):
    code = run("ablate", "--data", str(workspace / "data"),
               "--out-dir", str(tmp_path / "o"), "--seeds", "0")
    assert code == 2


def test_ablate_tiny_run(workspace, tmp_path):
    out = tmp_path / "abl"
    code = run("ablate", "--data", str(workspace / "data"), "--out-dir", str(out),
               "--seeds", "1", "--config", str(workspace / "train.cfg"))
    assert code == cli.EXIT_OK
    lines = (out / "ablation.csv").read_text().splitlines()
    assert lines[0].startswith("seed,use_mcot,")
    assert len(lines) == 5  # header + 2 arms + 2 median rows
    mcot_manifest = (out / "manifest_mcot.txt").read_text().splitlines()
    plain_manifest = (out / "manifest_plain.txt").read_text().splitlines()
    diff = [
        (a, b) for a, b in zip(mcot_manifest, plain_manifest) if a != b
    ]
    assert diff == [("use_mcot=true", "use_mcot=false")]


def test_bench_rows_and_brute_guard(tmp_path, capsys):
    out = tmp_path / "bench.csv"
    code = run("bench", "--sizes", "8,16", "--solvers", "exact,brute",
               "--out", str(out))
    assert code == cli.EXIT_OK
    printed = capsys.readouterr().out
    assert "brute excluded at N=16" in printed
    lines = out.read_text().splitlines()
    assert lines[0] == "solver,n,seconds,total_cost,cost_gap"
    assert len(lines) == 4  # exact x2, brute only at n=8
    for row in lines[1:]:
        assert float(row.split(",")[-1]) >= 0.0


def test_bench_entropic_default_epsilon(tmp_path):
    out = tmp_path / "bench.csv"
    assert run("bench", "--sizes", "16", "--solvers", "entropic",
               "--out", str(out)) == 0
    rows = out.read_text().splitlines()
    assert len(rows) == 2
    assert float(rows[1].split(",")[-1]) >= 0.0


def test_bench_rejects_bad_sizes():
    assert run("bench", "--sizes", "8,many") == 2


def test_bench_rejects_unknown_solver():
    assert run("bench", "--sizes", "8", "--solvers", "simplex") == 2


# --- artifact hygiene -------------------------------------------------------------


def test_manifest_is_stable(workspace, tmp_path):
    data = workspace / "data"
    args = ["hide", "--cover", str(data / "synthetic_000.ppm"),
            "--secret", str(data / "synthetic_001.ppm"),
            "--model", str(model_path(workspace))]
    a = tmp_path / "a.ppm"
    b = tmp_path / "b.ppm"
    assert run(*args, "--out-stego", str(a), "--out-key", str(tmp_path / "a.key")) == 0
    assert run(*args, "--out-stego", str(b), "--out-key", str(tmp_path / "b.key")) == 0
    text_a = (tmp_path / "a.ppm.manifest.txt").read_text()
    text_b = (tmp_path / "b.ppm.manifest.txt").read_text()
    assert text_a.replace("a.ppm", "o.ppm").replace("a.key", "o.key") == \
        text_b.replace("b.ppm", "o.ppm").replace("b.key", "o.key")


def test_stego_is_viewable_image(workspace, tmp_path):
    data = workspace / "data"
    stego = tmp_path / "s.ppm"
    assert run("hide", "--cover", str(data / "synthetic_000.ppm"),
               "--secret", str(data / "synthetic_001.ppm"),
               "--model", str(model_path(workspace)),
               "--out-stego", str(stego), "--out-key", str(tmp_path / "s.key")) == 0
    img = load_image(stego)
    assert img.shape == (3, 16, 16)
    assert float(img.min()) >= 0.0 and float(img.max()) <= 1.0
