import csv
import json
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from tgm.cli import main
from tgm.model import load_checkpoint


def write_json(path, data):
    path.write_text(json.dumps(data))
    return str(path)


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    spec = write_json(out / "spec.json", {"num_videos": 12, "d": 6, "t_min": 20, "t_max": 30,
                                          "num_classes": 2, "delays": [0, 2],
                                          "events_per_video": 3})
    assert main(["gen-synth", "--config", spec, "--out", str(out / "data")]) == 0
    return out / "data" / "manifest.json"


@pytest.fixture
def train_config(tmp_path):
    return write_json(tmp_path / "cfg.json", {
        "model": {"num_classes": 2, "d": 6, "layers": [
            {"form": "tgm_channel_combine_1x1", "c_out": 3, "L": 3, "M": 2},
            {"form": "tgm_channel_combine_1x1", "c_out": 2, "L": 3, "M": 2}]},
        "train": {"epochs": 2}})


def test_gen_synth_default_counts(tmp_path, capsys):
    assert main(["gen-synth", "--out", str(tmp_path)]) == 0
    names = os.listdir(tmp_path)
    assert sum(n.endswith(".tgmf") for n in names) == 200
    assert sum(n.endswith(".tgml") for n in names) == 200
    assert "manifest.json" in names
    summary = json.loads(capsys.readouterr().out)
    assert summary["videos"] == 200


def test_gen_synth_is_byte_identical(tmp_path):
    spec = write_json(tmp_path / "s.json", {"num_videos": 4, "seed": 5})
    for d in ("a", "b"):
        assert main(["gen-synth", "--config", spec, "--out", str(tmp_path / d)]) == 0
    for name in os.listdir(tmp_path / "a"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_gen_synth_invalid_spec(tmp_path):
    spec = write_json(tmp_path / "s.json", {"num_videos": 4, "wobble": 1})
    assert main(["gen-synth", "--config", spec, "--out", str(tmp_path / "o")]) == 2


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
def test_gen_synth_unwritable(tmp_path):
    locked = tmp_path / "locked"
    locked.mkdir(mode=0o500)
    assert main(["gen-synth", "--out", str(locked / "x")]) == 3


def test_gen_synth_out_is_a_file(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["gen-synth", "--out", str(blocker / "x")]) == 3


def test_train_eval_and_export(tmp_path, small_dataset, train_config, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", train_config, "--manifest", str(small_dataset),
                 "--out", str(out)]) == 0
    log = [json.loads(l) for l in (out / "train_log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in log] == [0, 1]
    capsys.readouterr()

    assert main(["eval", "--checkpoint", str(out / "last.tgmm"),
                 "--manifest", str(small_dataset)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert 0 <= report["map"] <= 1 and len(report["per_class"]) == 2

    csv_path = tmp_path / "k.csv"
    assert main(["export-kernels", "--checkpoint", str(out / "last.tgmm"),
                 "--out", str(csv_path)]) == 0
    with open(csv_path) as fh:
        rows = list(csv.DictReader(fh))
    sums = {}
    kernel_index = -1
    for row in rows:
        if row["tap"] == "0":
            kernel_index += 1
        sums[kernel_index] = sums.get(kernel_index, 0.0) + float(row["value"])
    assert len(sums) == 1 * 3 + 3 * 2
    assert all(abs(s - 1.0) < 1e-8 for s in sums.values())
    first = csv_path.read_bytes()
    main(["export-kernels", "--checkpoint", str(out / "last.tgmm"), "--out", str(csv_path)])
    assert csv_path.read_bytes() == first


def test_train_zero_lr_keeps_initial_params(tmp_path, small_dataset, train_config):
    out = tmp_path / "run"
    assert main(["train", "--config", train_config, "--manifest", str(small_dataset),
                 "--out", str(out), "--lr", "0"]) == 0
    init, _, _ = load_checkpoint(out / "initial.tgmm")
    last, _, _ = load_checkpoint(out / "last.tgmm")
    for name in init.params:
        assert init.params[name].tobytes() == last.params[name].tobytes()


def test_train_resume_reproduces_log(tmp_path, small_dataset, train_config):
    full, part = tmp_path / "full", tmp_path / "part"
    args = ["--config", train_config, "--manifest", str(small_dataset), "--seed", "3"]
    assert main(["train", *args, "--out", str(full), "--epochs", "3"]) == 0
    assert main(["train", *args, "--out", str(part), "--epochs", "1"]) == 0
    assert main(["train", "--manifest", str(small_dataset), "--out", str(part),
                 "--resume", str(part / "last.tgmm"), "--epochs", "3"]) == 0

    def strip(path):
        return [{k: v for k, v in json.loads(l).items() if k != "wall_ms"}
                for l in (path / "train_log.jsonl").read_text().splitlines()]

    assert strip(full) == strip(part)


def test_train_non_finite_exits_4(tmp_path, small_dataset):
    cfg = write_json(tmp_path / "c.json", {"model": {"num_classes": 2, "d": 6},
                                           "train": {"epochs": 3, "base_lr": 1.5e308}})
    out = tmp_path / "run"
    with np.errstate(all="ignore"):
        code = main(["train", "--config", cfg, "--manifest", str(small_dataset), "--out", str(out)])
    assert code == 4
    assert (out / "initial.tgmm").exists()


def test_train_rejects_unknown_config_keys(tmp_path, small_dataset):
    cfg = write_json(tmp_path / "c.json", {"model": {"num_classes": 2, "d": 6},
                                           "train": {"epochz": 3}})
    assert main(["train", "--config", cfg, "--manifest", str(small_dataset),
                 "--out", str(tmp_path / "o")]) == 2


def test_train_missing_manifest_is_io_error(tmp_path, train_config):
    assert main(["train", "--config", train_config, "--manifest", str(tmp_path / "none.json"),
                 "--out", str(tmp_path / "o")]) == 3


def test_eval_dimension_mismatch(tmp_path, small_dataset):
    cfg = write_json(tmp_path / "c.json", {"model": {"num_classes": 2, "d": 7},
                                           "train": {"epochs": 1}})
    data = write_json(tmp_path / "s.json", {"num_videos": 3, "d": 7, "num_classes": 2,
                                            "delays": [0, 1]})
    main(["gen-synth", "--config", data, "--out", str(tmp_path / "d7")])
    main(["train", "--config", cfg, "--manifest", str(tmp_path / "d7" / "manifest.json"),
          "--out", str(tmp_path / "r")])
    assert main(["eval", "--checkpoint", str(tmp_path / "r" / "last.tgmm"),
                 "--manifest", str(small_dataset)]) == 2


def test_eval_empty_manifest(tmp_path, small_dataset, train_config):
    main(["train", "--config", train_config, "--manifest", str(small_dataset),
          "--out", str(tmp_path / "r"), "--epochs", "1"])
    empty = write_json(tmp_path / "m.json", [])
    assert main(["eval", "--checkpoint", str(tmp_path / "r" / "last.tgmm"),
                 "--manifest", empty]) == 2


def test_eval_oracle_checkpoint_on_zero_delay_data(tmp_path, capsys):
    from tgm.data import SynthSpec, gen_synthetic, save_dataset
    from tgm.model import ModelConfig, TgmModel, save_checkpoint
    spec = SynthSpec(num_videos=20, delays=[0] * 5, noise_std=0.2)
    manifest = save_dataset(gen_synthetic(spec), tmp_path / "d")
    model = TgmModel(ModelConfig(num_classes=5, d=16), params={
        "classifier.weight": 20.0 * spec.trigger_directions().T,
        "classifier.bias": np.full(5, -10.0)})
    save_checkpoint(tmp_path / "oracle.tgmm", model)
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(tmp_path / "oracle.tgmm"), "--manifest", manifest,
                 "--threads", "2"]) == 0
    assert json.loads(capsys.readouterr().out)["map"] >= 0.95


def test_eval_corrupt_checkpoint(tmp_path, small_dataset):
    bad = tmp_path / "bad.tgmm"
    bad.write_bytes(b"XGMM" + bytes(20))
    assert main(["eval", "--checkpoint", str(bad), "--manifest", str(small_dataset)]) == 2


def test_gradcheck_default_matrix_passes(capsys):
    assert main(["gradcheck"]) == 0
    lines = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
    assert lines[-1] == {"pass": True, "failures": 0}
    assert len(lines) == 20 + 2 + 1
    skipped = [l for l in lines[:-1] if l["skipped"]]
    assert any("layer0.filters" in l["skipped"] or "filters" in l["skipped"] for l in skipped)


def test_gradcheck_injected_bug_names_tensor(capsys):
    assert main(["gradcheck", "--inject-bug"]) != 0
    lines = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
    failing = [l for l in lines if l.get("check", "").startswith("model") and not l["pass"]]
    assert failing and all(l["worst_parameter"] == "layer0.mu_hat" for l in failing)


def params_config(tmp_path, layers, d=1024, classifier="shared_linear"):
    return write_json(tmp_path / "p.json", {"model": {"num_classes": 65, "d": d,
                                                      "classifier": classifier,
                                                      "layers": layers}})


def test_params_table_rows(tmp_path, capsys):
    cfg = params_config(tmp_path, [{"form": "tgm_single", "c_out": 65, "M": 16, "L": 15}])
    assert main(["params", "--config", cfg]) == 0
    assert "1,072" in capsys.readouterr().out.splitlines()[1]
    cfg = params_config(tmp_path, [{"form": "conv1d_standard", "source": "unconstrained_free",
                                    "c_out": 65, "L": 15}])
    assert main(["params", "--config", cfg]) == 0
    assert "998,400" in capsys.readouterr().out.splitlines()[1]


def test_params_independent_of_L(tmp_path, capsys):
    cfg = params_config(tmp_path, [{"form": "tgm_single", "c_out": 8, "M": 4},
                                   {"form": "tgm_channel_combine_1x1", "c_out": 65, "M": 4}],
                        d=32)
    main(["params", "--config", cfg, "--L", "5"])
    short = capsys.readouterr().out.splitlines()
    main(["params", "--config", cfg, "--L", "50"])
    long = capsys.readouterr().out.splitlines()
    strip = [line.split()[-1] for line in short[1:]]
    assert strip == [line.split()[-1] for line in long[1:]]


def test_params_bad_config(tmp_path):
    cfg = params_config(tmp_path, [{"form": "tgm_single", "c_out": 3}],
                        classifier="per_class_linear")
    assert main(["params", "--config", cfg]) == 2
    (tmp_path / "broken.json").write_text("{")
    assert main(["params", "--config", str(tmp_path / "broken.json")]) == 2


@pytest.mark.slow
def test_one_epoch_smoke_run_on_default_data(tmp_path):
    assert main(["gen-synth", "--out", str(tmp_path / "d")]) == 0
    cfg = write_json(tmp_path / "c.json", {"model": {"num_classes": 5, "d": 16, "layers": [
        {"form": "tgm_channel_combine_1x1", "c_out": 8, "L": 5, "M": 8},
        {"form": "tgm_channel_combine_1x1", "c_out": 8, "L": 5, "M": 8},
        {"form": "tgm_channel_combine_1x1", "c_out": 5, "L": 5, "M": 8}]}})
    start = time.perf_counter()
    assert main(["train", "--config", cfg, "--manifest", str(tmp_path / "d" / "manifest.json"),
                 "--out", str(tmp_path / "r"), "--epochs", "1"]) == 0
    assert time.perf_counter() - start < 60


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "tgm", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "gen-synth" in proc.stdout
