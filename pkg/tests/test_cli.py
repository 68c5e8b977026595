import dataclasses
import hashlib
import json
import math

import numpy as np
import pytest
from PIL import Image

from nerfcl.cli import EXIT_IO, EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, load_experiment_config, main, schema_path
from nerfcl.errors import ConfigError
from nerfcl.metrics import psnr
from nerfcl.scenes import ChangeSet, generate_dataset

from conftest import tiny_scene

FAST = {"iters_per_step": "10", "batch_rays": "64", "n_samples": "8"}


def _config(path, **keys):
    lines = ["[experiment]"] + [f"{k} = {v}" for k, v in keys.items()]
    path.write_text("\n".join(lines) + "\n")
    return path


def _tree_hash(root, pattern="*"):
    h = hashlib.sha256()
    for p in sorted(root.rglob(pattern)):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def _train(tmp_path, ds_dir, name, **keys):
    cfg = _config(tmp_path / f"{name}.ini", dataset=ds_dir, output=tmp_path / name, **{**FAST, **keys})
    assert main(["train", str(cfg)]) == EXIT_OK
    return tmp_path / name


@pytest.fixture(scope="module")
def one_step_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("one")
    spec = dataclasses.replace(tiny_scene(), timesteps=[ChangeSet()], transients=[])
    generate_dataset(spec, 8, 0, root)
    return root


# gen

def test_gen_builtin(tmp_path, capsys):
    assert main(["gen", "builtin:default", str(tmp_path / "d"), "--cameras-per-step", "2"]) == EXIT_OK
    assert (tmp_path / "d" / "manifest.json").exists()
    assert capsys.readouterr().out.strip().endswith("manifest.json")


def test_gen_missing_spec(tmp_path, capsys):
    missing = tmp_path / "absent.json"
    assert main(["gen", str(missing), str(tmp_path / "d")]) == EXIT_IO
    assert str(missing) in capsys.readouterr().err


def test_gen_bad_spec_reports_line(tmp_path, capsys):
    spec = tmp_path / "s.json"
    spec.write_text('{\n "primitives": [\n}')
    assert main(["gen", str(spec), str(tmp_path / "d")]) == EXIT_VALIDATION
    assert "s.json:3:" in capsys.readouterr().err


def test_gen_same_seed_same_tree(tmp_path):
    spec = dataclasses.replace(tiny_scene(), cameras=dataclasses.replace(tiny_scene().cameras, width=12,
                                                                          height=12, focal=17.0))
    path = tmp_path / "s.json"
    path.write_text(json.dumps(spec.to_dict()))
    for name in ("a", "b"):
        assert main(["gen", str(path), str(tmp_path / name), "--seed", "7", "--cameras-per-step", "3"]) == 0
    assert _tree_hash(tmp_path / "a") == _tree_hash(tmp_path / "b")


def test_unknown_flag_rejected(tmp_path):
    assert main(["gen", "builtin:default", str(tmp_path), "--bogus"]) == EXIT_VALIDATION


def test_bad_threads_rejected(tmp_path):
    assert main(["--threads", "0", "gen", "builtin:default", str(tmp_path)]) == EXIT_VALIDATION


# config

def test_shipped_schema_parses():
    cfg = load_experiment_config(schema_path())
    assert cfg.strategy.kind == "CLNeRF" and cfg.strategy.buffer_capacity == 10


def test_unknown_config_key(tmp_path):
    with pytest.raises(ConfigError, match="colour"):
        load_experiment_config(_config(tmp_path / "c.ini", dataset="d", output="o", colour="red"))


def test_invalid_strategy_lists_kinds(tmp_path, capsys):
    cfg = _config(tmp_path / "c.ini", dataset=tmp_path, output=tmp_path / "o", strategy="GDumb")
    assert main(["train", str(cfg)]) == EXIT_VALIDATION
    err = capsys.readouterr().err
    assert all(k in err for k in ("NT", "EWC", "ER", "CLNeRF_noER", "CLNeRF", "MEIL", "UB"))


def test_ewc_on_hash_grid_rejected_before_compute(tmp_path):
    cfg = _config(tmp_path / "c.ini", dataset=tmp_path / "nowhere", output=tmp_path / "o", strategy="EWC")
    assert main(["train", str(cfg)]) == EXIT_VALIDATION
    assert not (tmp_path / "o").exists()


def test_percentage_capacity(tmp_path):
    cfg = load_experiment_config(_config(tmp_path / "c.ini", dataset="d", output="o", buffer_capacity="25%"))
    assert cfg.strategy.capacity(24) == 6


# train / eval / compare / render

def test_train_writes_resolved_config(tmp_path, tiny_dataset_dir):
    run = _train(tmp_path, tiny_dataset_dir, "er", strategy="ER", buffer_capacity="2")
    meta = json.loads((run / "config.json").read_text())
    assert meta["strategy"] == "ER" and meta["buffer_capacity"] == 2
    assert meta["reinit_per_step"] is True and len(meta["dataset_digest"]) == 64
    assert meta["buffer_bytes"] > 0
    assert sorted(p.name for p in run.glob("ckpt_t*.ctrd")) == ["ckpt_t0.ctrd", "ckpt_t1.ctrd", "ckpt_t2.ctrd"]
    assert (run / "log.jsonl").read_text().strip()


def test_train_rerun_identical_checkpoints(tmp_path, tiny_dataset_dir):
    a = _train(tmp_path, tiny_dataset_dir, "a", strategy="CLNeRF", buffer_capacity="1")
    b = _train(tmp_path, tiny_dataset_dir, "b", strategy="CLNeRF", buffer_capacity="1")
    assert _tree_hash(a, "*.ctrd") == _tree_hash(b, "*.ctrd")


def test_ub_on_single_timestep_equals_nt(tmp_path, one_step_dir):
    ub = _train(tmp_path, one_step_dir, "ub", strategy="UB")
    nt = _train(tmp_path, one_step_dir, "nt", strategy="NT")
    assert (ub / "ckpt_t0.ctrd").read_bytes() == (nt / "ckpt_t0.ctrd").read_bytes()


def test_eval_and_compare(tmp_path, tiny_dataset_dir, capsys):
    nt = _train(tmp_path, tiny_dataset_dir, "nt", strategy="NT")
    er = _train(tmp_path, tiny_dataset_dir, "er", strategy="ER", buffer_capacity="2")
    for run in (nt, er):
        assert main(["eval", str(run), "--samples", "8"]) == EXIT_OK
        assert (run / "metrics.csv").exists() and (run / "summary.txt").exists()
    capsys.readouterr()
    assert main(["compare", str(nt), str(er), "--out", str(tmp_path / "table.txt")]) == EXIT_OK
    table = (tmp_path / "table.txt").read_text()
    rows = {ln.split()[0]: float(ln.split()[1]) for ln in table.splitlines()[1:]}
    for run, name in ((nt, "NT"), (er, "ER")):
        own = (run / "summary.txt").read_text().splitlines()[1].split()
        assert own[0] == name and float(own[1]) == rows[name]
    assert list(rows.values()) == sorted(rows.values(), reverse=True)


def test_compare_identical_runs_give_identical_rows(tmp_path, tiny_dataset_dir, capsys):
    runs = [_train(tmp_path, tiny_dataset_dir, n, strategy="NT") for n in ("x", "y")]
    for run in runs:
        assert main(["eval", str(run), "--samples", "8"]) == EXIT_OK
    capsys.readouterr()
    assert main(["compare", *map(str, runs)]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()[1:]
    assert len(lines) == 2 and lines[0] == lines[1]


def test_compare_refuses_mixed_datasets(tmp_path, tiny_dataset_dir, one_step_dir, capsys):
    a = _train(tmp_path, tiny_dataset_dir, "a", strategy="NT")
    b = _train(tmp_path, one_step_dir, "b", strategy="NT")
    for run in (a, b):
        assert main(["eval", str(run), "--samples", "8"]) == EXIT_OK
    capsys.readouterr()
    assert main(["compare", str(a), str(b)]) == EXIT_VALIDATION
    err = capsys.readouterr().err
    for run in (a, b):
        assert json.loads((run / "config.json").read_text())["dataset_digest"] in err


def test_compare_needs_two_runs(tmp_path):
    assert main(["compare", str(tmp_path)]) == EXIT_VALIDATION


def test_eval_without_checkpoints(tmp_path, tiny_dataset_dir):
    run = _train(tmp_path, tiny_dataset_dir, "nt", strategy="NT")
    for p in run.glob("ckpt_t*.ctrd"):
        p.unlink()
    assert main(["eval", str(run)]) == EXIT_RUNTIME


def test_render_deterministic_and_checks_timestep(tmp_path, tiny_dataset, tiny_dataset_dir):
    run = _train(tmp_path, tiny_dataset_dir, "nt", strategy="NT")
    cam = tmp_path / "cam.json"
    cam.write_text(json.dumps(tiny_dataset.timesteps[0].images[0].camera.to_dict()))
    ckpt = str(run / "ckpt_t2.ctrd")
    outs = [tmp_path / "a.png", tmp_path / "b.png"]
    for out in outs:
        assert main(["render", ckpt, str(cam), "1", str(out), "--samples", "8"]) == EXIT_OK
    assert outs[0].read_bytes() == outs[1].read_bytes()
    assert main(["--threads", "3", "render", ckpt, str(cam), "1", str(tmp_path / "c.png"), "--samples", "8"]) == 0
    assert (tmp_path / "c.png").read_bytes() == outs[0].read_bytes()
    assert main(["render", ckpt, str(cam), "5", str(tmp_path / "d.png")]) == EXIT_RUNTIME


def test_render_training_view_matches_training_fit(tmp_path, one_step_dir):
    run = _train(tmp_path, one_step_dir, "fit", strategy="NT", iters_per_step="400", batch_rays="256",
                 n_samples="32")
    logs = [json.loads(ln) for ln in (run / "log.jsonl").read_text().splitlines()]
    train_psnr = -10 * math.log10(np.mean([r["loss"] for r in logs[-3:]]))
    manifest = json.loads((one_step_dir / "manifest.json").read_text())
    entry = next(e for e in manifest["timesteps"][0]["images"] if e["split"] == "train")
    cam = tmp_path / "cam.json"
    cam.write_text(json.dumps(entry["camera"]))
    out = tmp_path / "view.png"
    assert main(["render", str(run / "ckpt_t0.ctrd"), str(cam), "0", str(out)]) == EXIT_OK
    pred = np.asarray(Image.open(out), dtype=np.float64) / 255
    truth = np.asarray(Image.open(one_step_dir / entry["file"]), dtype=np.float64) / 255
    assert psnr(pred, truth) > train_psnr - 1.0
