import subprocess
import sys

import numpy as np
import pytest

from amortgmn import amortize as A
from amortgmn import metanet as M
from amortgmn import zoo as Z
from amortgmn.cli import main, read_config, substream

ZOO_FLAGS = ["--models", "6", "--widths", "64,8,10", "--checkpoints", "1,2", "--threshold", "0.0",
             "--n-train", "200", "--n-val", "60", "--n-test", "100"]


@pytest.fixture(scope="module")
def zoo_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "zoo"
    assert main(["zoo-gen", "--seed", "7", "--out", str(out)] + ZOO_FLAGS) == 0
    return out


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_substreams_differ_and_are_stable():
    assert substream(0, "a") == substream(0, "a")
    assert len({substream(0, "a"), substream(0, "b"), substream(1, "a")}) == 3


def test_zoo_gen_reproducible_and_creates_dirs(zoo_dir, tmp_path):
    out = tmp_path / "deep" / "nested" / "zoo"
    assert main(["zoo-gen", "--seed", "7", "--out", str(out)] + ZOO_FLAGS) == 0
    a, b = tree_bytes(zoo_dir), tree_bytes(out)
    a.pop("config.resolved.txt")
    b.pop("config.resolved.txt")
    assert a == b
    store = Z.load_zoo(out)
    assert len(store.records) == 12
    assert {r.split for r in store.records} == {"train", "val", "test"}


def test_empty_zoo_exit_code(tmp_path, capsys):
    code = main(["zoo-gen", "--out", str(tmp_path / "z"), "--threshold", "1.01"] + ZOO_FLAGS[:6])
    assert code == 2
    assert "empty zoo after filter" in capsys.readouterr().err


def test_bad_input_exit_codes(tmp_path, capsys):
    assert main(["train", "--zoo", str(tmp_path / "missing")]) == 2
    assert main(["zoo-gen", "--no-such-flag"]) == 2
    cfg = tmp_path / "bad.txt"
    cfg.write_text("bogus_key=1\n")
    assert main(["zoo-gen", "--config", str(cfg)]) == 2
    assert main(["gauge-analyze", "--spaces", "tri:3", "--out", str(tmp_path / "g")]) == 2


def test_console_script_help():
    r = subprocess.run([sys.executable, "-m", "amortgmn.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "zoo-gen" in r.stdout


def train_args(zoo_dir, out, *extra):
    return ["train", "--zoo", str(zoo_dir), "--out", str(out), "--epochs", "2", "--patience", "1",
            "--hidden-dim", "4", "--gnn-layers", "1", "--batch-fraction", "0.5"] + list(extra)


def test_train_deterministic_and_config_rerun(zoo_dir, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(train_args(zoo_dir, a)) == 0
    assert main(train_args(zoo_dir, b)) == 0
    assert (a / "metanet.bin").read_bytes() == (b / "metanet.bin").read_bytes()
    assert (a / "curves.csv").read_text() == (b / "curves.csv").read_text()
    rows = A.read_csv(a / "curves.csv")
    assert list(rows[0]) == A.CURVE_HEADER and len(rows) == 6
    # the snapshot alone reproduces the run (its output path is overridden here)
    snap = read_config(a / "config.resolved.txt")
    assert snap["command"] == "train" and snap["epochs"] == "2"
    c = tmp_path / "c"
    assert main(["train", "--config", str(a / "config.resolved.txt"), "--out", str(c)]) == 0
    assert (a / "metanet.bin").read_bytes() == (c / "metanet.bin").read_bytes()


def test_train_broken_toggles_only_canonicalization(zoo_dir, tmp_path):
    assert main(train_args(zoo_dir, tmp_path / "e")) == 0
    assert main(train_args(zoo_dir, tmp_path / "k", "--symmetry", "broken")) == 0
    e, k = M.load_checkpoint(tmp_path / "e" / "metanet"), M.load_checkpoint(tmp_path / "k" / "metanet")
    assert e.params.layout() == k.params.layout()
    de, dk = e.config.to_dict(), k.config.to_dict()
    assert {key for key in de if de[key] != dk[key]} == {"symmetry"}


def test_eval_identity_head_and_recomputation(zoo_dir, tmp_path, capsys):
    store = Z.load_zoo(zoo_dir)
    net = M.Metanet(M.MetanetConfig(hidden_dim=4, gnn_layers=1), store.arch, seed=0)
    net.zero_head()
    M.save_checkpoint(tmp_path / "ident", net)
    out = tmp_path / "ev"
    assert main(["eval", "--zoo", str(zoo_dir), "--checkpoint", str(tmp_path / "ident"), "--out", str(out),
                 "--baseline", "--baseline-epochs", "1,2", "--lam", "1e-3"]) == 0
    rows = A.read_csv(out / "eval.csv")
    assert list(rows[0]) == A.EVAL_HEADER
    meta = [r for r in rows if r["method"] == "metanet"]
    assert all(r["sparsity"] == 0 and r["acc_after"] == r["acc_before"] for r in meta)
    assert {r["method"] for r in rows} == {"metanet", "sgd-1", "sgd-2"}
    summary = A.read_csv(out / "summary.csv")
    assert [s["method"] for s in summary] == ["metanet", "sgd-1", "sgd-2"]
    # recompute the metanet rows from the dumped parameters
    thetas, ids = Z.split_arrays(store.records, "test")
    after = np.stack([np.fromfile(out / "thetas" / f"{i}.f32", dtype="<f4") for i in ids])
    from amortgmn.data import load_images
    test_imgs = load_images(zoo_dir / "images" / "test.bin")
    again = A.per_network_rows(thetas, after, store.arch, test_imgs, A.ObjectiveSpec(1e-3), "metanet", ids)
    assert again == meta
    rep = A.report_from_rows(again, "metanet")
    assert rep.avg_acc == summary[0]["avg_acc"] and rep.sparsity == summary[0]["sparsity"]
    assert "sgd-2" in capsys.readouterr().out


def test_eval_rejects_mismatched_checkpoint(zoo_dir, tmp_path):
    from amortgmn import nets
    M.save_checkpoint(tmp_path / "other", M.Metanet(M.MetanetConfig(hidden_dim=2, gnn_layers=0),
                                                    nets.mlp_arch([3, 2])))
    assert main(["eval", "--zoo", str(zoo_dir), "--checkpoint", str(tmp_path / "other"),
                 "--out", str(tmp_path / "x")]) == 2


def test_gauge_analyze_report(tmp_path, capsys):
    out = tmp_path / "g"
    code = main(["gauge-analyze", "--spaces", "mlp:3x4,cnn:3x3:k2x2", "--activations", "tanh", "--out", str(out)])
    text = capsys.readouterr().out
    assert code == 0
    rows = A.read_csv(out / "gauge_report.csv")
    by = {r["space"]: r for r in rows}
    assert by["MLP 3x4"]["admissible"] == 128
    cnn = next(r for r in rows if r["space"].startswith("CNN"))
    assert cnn["admissible"] == 4 and cnn["effective_dimension"] == 1
    assert "STRICT SUBSET" in text and "verdict [tanh]" in text


def test_gauge_analyze_skips_oversized(tmp_path, capsys):
    assert main(["gauge-analyze", "--spaces", "mlp:8x8", "--activations", "tanh", "--out", str(tmp_path)]) == 0
    assert A.read_csv(tmp_path / "gauge_report.csv")[0]["admissible"] == "skipped"


@pytest.mark.parametrize("act", ["tanh", "relu"])
@pytest.mark.parametrize("sym", ["equivariant", "broken"])
def test_symmetry_test_suite(act, sym, tmp_path, capsys):
    assert main(["symmetry-test", "--activation", act, "--symmetry", sym, "--trials", "3",
                 "--out", str(tmp_path)]) == 0
    rows = {r["case"]: r for r in A.read_csv(tmp_path / "symmetry.csv")}
    assert rows["operator_gauge"]["passed"] == ("True" if sym == "equivariant" else "False")
    assert all(r["as_expected"] == "True" for r in rows.values())


def test_symmetry_test_exit_code_on_unmet_expectation(tmp_path):
    # an impossible tolerance makes the expected-pass cases fail
    assert main(["symmetry-test", "--tol", "-1", "--trials", "1", "--out", str(tmp_path)]) == 1


def test_output_root_from_environment(zoo_dir, tmp_path, monkeypatch):
    monkeypatch.setenv("AMORTGMN_OUT", str(tmp_path / "root"))
    assert main(["symmetry-test", "--trials", "1"]) == 0
    assert (tmp_path / "root" / "symmetry" / "symmetry.csv").exists()


def test_config_with_bad_value_is_input_error(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("command=symmetry-test\ntrials=many\n")
    assert main(["symmetry-test", "--config", str(cfg)]) == 2
    cfg.write_text("command=train\n")
    assert main(["symmetry-test", "--config", str(cfg)]) == 2
