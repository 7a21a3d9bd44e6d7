"""End-to-end runs through the command-line entry point.

Everything goes through main(argv) in process so monkeypatching and
capsys work; FNGD_OUTPUT_DIR keeps artifacts inside tmp_path.
"""

import csv

import pytest

from fngd import linalg
from fngd.cli import main
from fngd.train import METRICS_COLUMNS, METRICS_VERSION


CFG = """\
[dataset]
kind = synthetic
n = 40
features = 5
classes = 2
test_n = 16

[model]
input = 5
layer = dense 5 4
layer = relu
layer = dense 4 2

[train]
optimizer = fngd
lr = 0.5
epochs = 2
batch_size = 8
seed = 3
"""


@pytest.fixture()
def out_dir(tmp_path, monkeypatch):
    d = tmp_path / "out"
    monkeypatch.setenv("FNGD_OUTPUT_DIR", str(d))
    return d


def _write_cfg(tmp_path, text, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return p


def _read_metrics(path):
    lines = path.read_text().splitlines()
    assert lines[0] == f"# {METRICS_VERSION} wall_ms=nondeterministic"
    rows = list(csv.DictReader(lines[1:]))
    assert tuple(rows[0].keys()) == METRICS_COLUMNS
    return rows


def test_train_writes_metrics(tmp_path, out_dir, capsys):
    cfg = _write_cfg(tmp_path, CFG)
    assert main(["train", "--config", str(cfg)]) == 0
    rows = _read_metrics(out_dir / "metrics.csv")
    # one train and one test row per epoch
    assert [(r["epoch"], r["split"]) for r in rows] == [
        ("1", "train"), ("1", "test"), ("2", "train"), ("2", "test")]
    assert all(r["optimizer"] == "fngd" for r in rows)
    losses = [float(r["loss"]) for r in rows]
    assert all(l > 0 for l in losses)
    accs = [float(r["accuracy"]) for r in rows]
    assert all(0.0 <= a <= 1.0 for a in accs)
    # training on separable clusters must beat coin flipping by epoch 2
    assert accs[-1] > 0.5
    out = capsys.readouterr().out
    assert "metrics written to" in out


def test_verify_passes_and_prints_one_line_per_check(capsys):
    assert main(["verify", "--seed", "0"]) == 0
    out = capsys.readouterr().out.splitlines()
    checks = [l for l in out if l.startswith(("PASS", "FAIL"))]
    assert len(checks) == 9
    assert all(l.startswith("PASS") for l in checks)
    assert all("measured=" in l and "threshold=" in l for l in checks)
    assert out[-1] == "all checks passed"


def test_verify_verbose_adds_detail(capsys):
    assert main(["verify", "--verbose"]) == 0
    out = capsys.readouterr().out
    assert "(" in out


def test_coefficient_table_round_trip(tmp_path, out_dir, monkeypatch):
    cfg = _write_cfg(tmp_path, CFG)
    table_path = tmp_path / "coeffs.csv"
    assert main(["train", "--config", str(cfg), "--save-coeffs", str(table_path)]) == 0
    head = table_path.read_text().splitlines()[0]
    assert head == "fngd-coefficients,1"

    solves = []
    real = linalg.solve_spd

    def counting(a, b):
        solves.append(1)
        return real(a, b)

    monkeypatch.setattr(linalg, "solve_spd", counting)
    one_epoch = _write_cfg(tmp_path, CFG.replace("epochs = 2", "epochs = 1"),
                           name="resume.cfg")
    assert main(["train", "--config", str(one_epoch),
                 "--load-coeffs", str(table_path)]) == 0
    assert not solves, "a loaded table must skip every coefficient solve"
    rows = _read_metrics(out_dir / "metrics.csv")
    assert rows[0]["epoch"] == "1"


def test_output_dir_redirect_keeps_names(tmp_path, monkeypatch):
    target = tmp_path / "elsewhere"
    monkeypatch.setenv("FNGD_OUTPUT_DIR", str(target))
    cfg = _write_cfg(tmp_path, CFG + "\n[output]\nmetrics = nested/dir/custom.csv\n")
    assert main(["train", "--config", str(cfg)]) == 0
    assert (target / "custom.csv").exists()


def test_config_error_exits_2(tmp_path, out_dir, capsys):
    cfg = _write_cfg(tmp_path, CFG.replace("lr = 0.5", "lr = -1"))
    assert main(["train", "--config", str(cfg)]) == 2
    err = capsys.readouterr().err
    assert err.startswith("error: train.lr")


def test_missing_config_exits_2(tmp_path, out_dir, capsys):
    assert main(["train", "--config", str(tmp_path / "ghost.cfg")]) == 2
    assert "error:" in capsys.readouterr().err


def test_runs_are_reproducible_modulo_wall_time(tmp_path, monkeypatch):
    cfg = _write_cfg(tmp_path, CFG)

    def run(name):
        monkeypatch.setenv("FNGD_OUTPUT_DIR", str(tmp_path / name))
        assert main(["train", "--config", str(cfg)]) == 0
        rows = _read_metrics(tmp_path / name / "metrics.csv")
        for r in rows:
            r["wall_ms"] = ""
        return rows

    assert run("a") == run("b")


def test_bench_writes_phase_table(tmp_path, out_dir):
    text = CFG.replace("epochs = 2", "epochs = 4").replace("n = 40", "n = 24")
    text = text.replace("batch_size = 8", "batch_size = 6")
    cfg = _write_cfg(tmp_path, text)
    assert main(["bench", "--config", str(cfg)]) == 0
    lines = (out_dir / "bench.csv").read_text().splitlines()
    assert lines[0].startswith("# fngd-bench-v1")
    rows = list(csv.DictReader(lines[1:]))
    got = {(r["optimizer"], r["phase"]) for r in rows}
    assert got == {
        ("sgd", "all"), ("ngd_smw", "all"),
        ("fngd", "epoch1"), ("fngd", "shared"),
        ("fngd_explicit", "epoch1"), ("fngd_explicit", "shared"),
    }
    sgd = next(r for r in rows if r["optimizer"] == "sgd")
    assert float(sgd["ratio_vs_sgd"]) == 1.0
    assert all(float(r["median_epoch_ms"]) > 0 for r in rows)


def test_bench_needs_four_epochs(tmp_path, out_dir, capsys):
    cfg = _write_cfg(tmp_path, CFG.replace("epochs = 2", "epochs = 3"))
    assert main(["bench", "--config", str(cfg)]) == 2
    assert "at least 4 epochs" in capsys.readouterr().err


def test_ablate_writes_variant_table(tmp_path, out_dir):
    text = CFG.replace("n = 40", "n = 24").replace("batch_size = 8", "batch_size = 6")
    cfg = _write_cfg(tmp_path, text)
    assert main(["ablate", "--config", str(cfg)]) == 0
    lines = (out_dir / "ablate.csv").read_text().splitlines()
    assert lines[0].startswith("# fngd-ablate-v1")
    rows = list(csv.DictReader(lines[1:]))
    assert [r["variant"] for r in rows] == [
        "full", "no_sharing", "no_acceleration", "fixed_damping"]
    full = rows[0]
    assert float(full["time_ratio_vs_full"]) == 1.0
    assert all(0.0 <= float(r["final_test_accuracy"]) <= 1.0 for r in rows)


DEGENERATE = """\
[dataset]
kind = synthetic
n = 32
features = 4
classes = 2
test_n = 8

[model]
input = 4
layer = dense 4 2 nobias

[train]
optimizer = {kind}
lr = {lr}
epochs = 3
batch_size = 8
seed = 7
{extra}
"""


def test_huge_fixed_damping_collapses_to_sgd(tmp_path, monkeypatch):
    # with lam fixed at 1e12 the coefficients flatten to 1/M and the
    # update is (lr/lam) times the batch gradient; lr = lam * 0.05
    # must therefore track plain sgd at 0.05
    lam = 1e12
    fngd_cfg = _write_cfg(
        tmp_path,
        DEGENERATE.format(kind="fngd", lr=repr(lam * 0.05),
                          extra=f"fixed_damping = {lam!r}"),
        name="fngd.cfg")
    sgd_cfg = _write_cfg(
        tmp_path, DEGENERATE.format(kind="sgd", lr="0.05", extra=""),
        name="sgd.cfg")

    def final_losses(cfg, name):
        monkeypatch.setenv("FNGD_OUTPUT_DIR", str(tmp_path / name))
        assert main(["train", "--config", str(cfg)]) == 0
        rows = _read_metrics(tmp_path / name / "metrics.csv")
        return {(r["epoch"], r["split"]): float(r["loss"]) for r in rows}

    a = final_losses(fngd_cfg, "fngd_run")
    b = final_losses(sgd_cfg, "sgd_run")
    assert a.keys() == b.keys()
    for key in a:
        assert abs(a[key] - b[key]) <= 1e-4 * max(1.0, abs(b[key]))
