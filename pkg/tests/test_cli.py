import json
import os
import subprocess
import sys

import pytest

from dignet import ablation
from dignet.checkpoint import load_checkpoint
from dignet.cli import main
from dignet.config import ConfigError, parse_run_config
from dignet.imageio import read_pgm, read_ppm
from dignet.model import NetworkConfig

TINY_NETWORK = {
    "backbone": {
        "stages": [{"in_channels": 3, "out_channels": 4, "stride": 2},
                   {"in_channels": 4, "out_channels": 4, "stride": 2},
                   {"in_channels": 4, "out_channels": 6, "stride": 1, "relu": False}],
        "num_classes": 6, "output_stride": 4},
    "feedback_widths": [4, 4],
    "T": 2,
}


def tiny_config(tmp_path, **overrides):
    doc = {"network": dict(TINY_NETWORK), "train": {"batch_size": 4},
           "data": {"synthetic": {"image_size": 16}, "train": 8, "val": 4},
           "seed": 1, "epochs": 1}
    for k, v in overrides.items():
        if k == "network":
            doc["network"].update(v)
        else:
            doc[k] = v
    path = tmp_path / "run.json"
    path.write_text(json.dumps(doc))
    return str(path)


def test_missing_config_names_path(tmp_path, capsys):
    missing = str(tmp_path / "nope.json")
    assert main(["train", missing, "--out", str(tmp_path / "o")]) == 1
    assert missing in capsys.readouterr().err


@pytest.mark.parametrize("doc, where", [
    ({"data": {"dir": "x"}, "bogus": 1}, "bogus"),
    ({"data": {"dir": "x"}, "network": {"routing": "sideways"}}, "network/routing"),
    ({"data": {"dir": "x"}, "train": {"batch_size": 0}}, "train/batch_size"),
    ({}, "data"),
])
def test_schema_rejects(doc, where):
    with pytest.raises(ConfigError, match=where):
        parse_run_config(doc)


def test_semantic_validation_after_schema():
    with pytest.raises(ConfigError, match="feedback_widths"):
        parse_run_config({"data": {"dir": "x"}, "network": {"feedback_widths": [1]}})


def test_usage_errors_exit_1(tmp_path):
    cfg = tiny_config(tmp_path)
    with pytest.raises(SystemExit) as info:
        main(["ablate", cfg, "--axis", "sideways", "--out", "a.csv"])
    assert info.value.code == 1
    with pytest.raises(SystemExit) as info:
        main([])
    assert info.value.code == 1


def test_train_eval_and_determinism(tmp_path, capsys):
    cfg = tiny_config(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train", cfg, "--seed", "7", "--out", str(a)]) == 0
    assert main(["train", cfg, "--seed", "7", "--out", str(b)]) == 0
    assert (a / "metrics.jsonl").read_bytes() == (b / "metrics.jsonl").read_bytes()
    assert (a / "checkpoint.digc").read_bytes() == (b / "checkpoint.digc").read_bytes()
    rec = json.loads((a / "metrics.jsonl").read_text().splitlines()[0])
    assert set(rec) == {"epoch", "iter", "lr", "loss", "miou"}
    ck = load_checkpoint(a / "checkpoint.digc")
    assert ck.iteration == 2
    capsys.readouterr()
    assert main(["eval", cfg, str(a / "checkpoint.digc")]) == 0
    metrics = json.loads(capsys.readouterr().out)
    assert metrics["miou"] == pytest.approx(rec["miou"])


def test_eval_config_mismatch(tmp_path, capsys):
    cfg = tiny_config(tmp_path)
    assert main(["train", cfg, "--out", str(tmp_path / "r")]) == 0
    other = tiny_config(tmp_path, network={"T": 3})
    assert main(["eval", other, str(tmp_path / "r" / "checkpoint.digc")]) == 2
    assert "does not match" in capsys.readouterr().err


def test_gen_data_counts_and_reruns(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"image_size": 16, "num_classes": 6}))
    for d in ("d1", "d2"):
        assert main(["gen-data", str(spec), "--train", "10", "--val", "2",
                     "--out", str(tmp_path / d)]) == 0
    for sub in ("images", "labels"):
        assert len(os.listdir(tmp_path / "d1" / sub)) == 12
    manifest = json.loads((tmp_path / "d1" / "manifest.json").read_text())
    assert manifest["num_classes"] == 6
    for root, _, files in os.walk(tmp_path / "d1"):
        for f in files:
            p1 = os.path.join(root, f)
            p2 = p1.replace(str(tmp_path / "d1"), str(tmp_path / "d2"))
            with open(p1, "rb") as f1, open(p2, "rb") as f2:
                assert f1.read() == f2.read()


def test_train_from_dataset_dir(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"image_size": 16}))
    assert main(["gen-data", str(spec), "--train", "4", "--val", "2",
                 "--out", str(tmp_path / "ds")]) == 0
    cfg = tiny_config(tmp_path, data={"dir": "ds"})
    assert main(["train", cfg, "--out", str(tmp_path / "r")]) == 0


@pytest.fixture
def trained(tmp_path):
    def make(**net):
        out = tmp_path / ("ck_" + "_".join(f"{k}{v}" for k, v in sorted(net.items())))
        cfg = tiny_config(tmp_path, network=net)
        assert main(["train", cfg, "--out", str(out)]) == 0
        return str(out / "checkpoint.digc")
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"image_size": 16}))
    main(["gen-data", str(spec), "--train", "1", "--val", "0", "--out", str(tmp_path / "img")])
    return make, str(tmp_path / "img" / "images" / "000000.ppm")


def test_visualize_outputs(tmp_path, trained):
    make, image = trained
    ck = make()
    out = tmp_path / "v1"
    assert main(["visualize", ck, image, "--T", "1", "--out", str(out)]) == 0
    assert sorted(os.listdir(out)) == ["iter_1.ppm"]
    out = tmp_path / "v3"
    assert main(["visualize", ck, image, "--T", "3", "--out", str(out)]) == 0
    names = sorted(os.listdir(out))
    assert names == ["feedback_stage_1.pgm", "feedback_stage_2.pgm", "feedback_stage_3.pgm",
                     "iter_1.ppm", "iter_2.ppm", "iter_3.ppm"]
    assert read_ppm(out / "iter_2.ppm").shape == (16, 16, 3)
    assert read_pgm(out / "feedback_stage_1.pgm").shape == (16, 16)
    assert read_pgm(out / "feedback_stage_3.pgm").shape == (4, 4)


def test_visualize_partial_mask_and_none(tmp_path, trained):
    make, image = trained
    out = tmp_path / "vm"
    assert main(["visualize", make(gating_mask=[False, True, True]), image, "--T", "2",
                 "--out", str(out)]) == 0
    assert len(os.listdir(out)) == 2 + 2
    out = tmp_path / "vn"
    assert main(["visualize", make(routing="none"), image, "--T", "3", "--out", str(out)]) == 0
    blobs = [(out / f"iter_{t}.ppm").read_bytes() for t in (1, 2, 3)]
    assert len(os.listdir(out)) == 3 and blobs[0] == blobs[1] == blobs[2]


def test_visualize_dimension_mismatch(tmp_path, trained):
    make, _ = trained
    bad = tmp_path / "bad.ppm"
    bad.write_bytes(b"P6\n10 10\n255\n" + bytes(300))
    assert main(["visualize", make(), str(bad), "--out", str(tmp_path / "v")]) == 1


def test_gradcheck_exit_codes(capsys):
    assert main(["gradcheck", "--seed", "0"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "prop1.wc.weight" in out and "mod2.squash.bias" in out
    assert main(["gradcheck", "--perturb-grad"]) == 3
    assert "FAIL" in capsys.readouterr().out


def test_ablation_enumeration():
    base = NetworkConfig()
    routing = ablation.cases_for_axis("routing", base)
    assert len(routing) == 16
    assert {(c.variant, c.network.T) for c in routing} == {
        (v, t) for v in ablation.ROUTING_ORDER for t in (1, 2, 3, 4)}
    extent = ablation.cases_for_axis("gating-extent", base)
    assert [c.variant for c in extent] == ["mask=000000", "mask=000001", "mask=000011",
                                           "mask=000111", "mask=001111", "mask=011111",
                                           "mask=111111"]
    mods = ablation.cases_for_axis("modulator", base)
    assert [c.network.pyramid_rates for c in mods] == [(), (1, 3, 5, 7)]
    assert [c.network.T for c in ablation.cases_for_axis("T", base)] == [1, 2, 3, 4]
    with pytest.raises(ValueError):
        ablation.cases_for_axis("depth", base)


def test_ablate_routing_rows_and_figure(tmp_path, monkeypatch):
    cfg = tiny_config(tmp_path)
    csv_path = tmp_path / "out" / "routing.csv"
    monkeypatch.setenv("DIGNET_THREADS", "2")
    assert main(["ablate", cfg, "--axis", "routing", "--out", str(csv_path)]) == 0
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "variant,T,miou,pacc,macc,seed"
    rows = ablation.read_csv(csv_path)
    assert len(rows) == 16
    t1 = {r["miou"] for r in rows if r["T"] == 1}
    assert len(t1) == 1
    png = tmp_path / "out" / "routing.png"
    assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_ablate_row_order_independent_of_threads(tmp_path, monkeypatch):
    cfg = tiny_config(tmp_path)
    outs = []
    for threads in ("1", "3"):
        monkeypatch.setenv("DIGNET_THREADS", threads)
        path = tmp_path / f"m{threads}.csv"
        assert main(["ablate", cfg, "--axis", "modulator", "--seeds", "0,1",
                     "--out", str(path), "--no-plot"]) == 0
        outs.append(path.read_bytes())
    assert outs[0] == outs[1]
    assert not (tmp_path / "m1.png").exists()


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "dignet", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "gen-data" in r.stdout
