import csv
import dataclasses
import hashlib

import numpy as np
import pytest

from nerfcl.continual import StrategyConfig, run_sequence
from nerfcl.errors import DomainError, ProtocolError
from nerfcl.evaluation import (METRICS_FILE, SUMMARY_FILE, MetricRecord, Summary, compare_summaries,
                               evaluate_sequence, read_report, summarize, write_report)
from nerfcl.field import FieldConfig
from nerfcl.scenes import ChangeSet, generate_dataset, load_dataset

from conftest import tiny_scene

FAST = dict(iters_per_step=10, batch_rays=64, n_samples=8, eval_samples=8)


@pytest.fixture(scope="module")
def trained(tiny_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    res = run_sequence(tiny_dataset, StrategyConfig(kind="NT", **FAST), FieldConfig(), 0, out_dir=out)
    return res


def _hash_tree(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_final_model_scores_every_timestep(trained, tiny_dataset):
    records, summary = evaluate_sequence(trained.checkpoints, tiny_dataset, "NT", n_samples=8)
    final = [r for r in records if r.train_timestep == 2]
    assert [r.eval_timestep for r in final] == [0, 1, 2]
    assert summary.mean_psnr == pytest.approx(np.mean([r.psnr for r in final]), abs=1e-12)
    assert [t for t, _, _ in summary.per_timestep] == [0, 1, 2]


def test_forgetting_curves_cover_seen_timesteps(trained, tiny_dataset):
    records, _ = evaluate_sequence(trained.checkpoints, tiny_dataset, "NT", n_samples=8)
    pairs = {(r.train_timestep, r.eval_timestep) for r in records}
    assert pairs == {(k, t) for k in range(3) for t in range(k + 1)}
    only_final, _ = evaluate_sequence(trained.checkpoints, tiny_dataset, "NT", n_samples=8, curves=False)
    assert only_final == [r for r in records if r.train_timestep == 2]


def test_missing_final_checkpoint(trained, tiny_dataset):
    with pytest.raises(ProtocolError, match="final checkpoint"):
        evaluate_sequence(trained.checkpoints[:2], tiny_dataset, "NT")


def test_checkpoint_file_missing(trained, tiny_dataset, tmp_path):
    ghost = tmp_path / "ckpt_t1.ctrd"
    with pytest.raises(ProtocolError, match="missing checkpoint"):
        evaluate_sequence([trained.checkpoints[0], ghost, trained.checkpoints[2]], tiny_dataset, "NT")


def test_evaluation_leaves_inputs_untouched(trained, tiny_dataset, tiny_dataset_dir):
    run_dir = trained.checkpoints[0].parent
    before = (_hash_tree(run_dir), _hash_tree(tiny_dataset_dir))
    evaluate_sequence(trained.checkpoints, tiny_dataset, "NT", n_samples=8)
    assert (_hash_tree(run_dir), _hash_tree(tiny_dataset_dir)) == before


def test_workers_do_not_change_scores(trained, tiny_dataset):
    a, _ = evaluate_sequence(trained.checkpoints, tiny_dataset, "NT", n_samples=8, workers=1)
    b, _ = evaluate_sequence(trained.checkpoints, tiny_dataset, "NT", n_samples=8, workers=3)
    assert a == b


def test_single_timestep_summary(tmp_path):
    spec = dataclasses.replace(tiny_scene(), timesteps=[ChangeSet()], transients=[])
    generate_dataset(spec, 8, 0, tmp_path / "ds")
    ds = load_dataset(tmp_path / "ds")
    res = run_sequence(ds, StrategyConfig(kind="UB", **FAST), FieldConfig(), 0, out_dir=tmp_path / "run")
    records, summary = evaluate_sequence(res.checkpoints, ds, "UB", n_samples=8)
    assert len(records) == 1
    assert (summary.mean_psnr, summary.mean_ssim) == (records[0].psnr, records[0].ssim)
    again, _ = evaluate_sequence(res.checkpoints, ds, "UB", n_samples=8)
    assert again == records


# reports

def _records():
    return [MetricRecord("ER", t, k, 20.0 + t + 0.1 * k, 0.5 + 0.01 * t, 44, 12.5)
            for k in range(2) for t in range(k + 1)]


def test_report_round_trip(tmp_path):
    records = _records()
    write_report(records, tmp_path)
    assert read_report(tmp_path) == records


def test_report_floats_survive_exactly(tmp_path):
    records = [MetricRecord("NT", 0, 0, 1 / 3, 0.1 + 0.2)]
    write_report(records, tmp_path)
    assert read_report(tmp_path) == records


def test_report_mean_matches_csv_rows(tmp_path):
    records = _records()
    write_report(records, tmp_path)
    with open(tmp_path / METRICS_FILE, newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if r["train_timestep"] == "1"]
    manual = sum(float(r["psnr"]) for r in rows) / len(rows)
    assert summarize(read_report(tmp_path))["ER"].mean_psnr == pytest.approx(manual, abs=1e-12)
    line = (tmp_path / SUMMARY_FILE).read_text().splitlines()[1].split()
    assert line[0] == "ER" and float(line[1]) == pytest.approx(manual, abs=5e-4)


def test_report_is_byte_stable_without_wall_time(tmp_path):
    a = _records()
    b = [dataclasses.replace(r, wall_time=99.0) for r in a]
    write_report(a, tmp_path / "a")
    write_report(b, tmp_path / "b")
    for name in (METRICS_FILE, SUMMARY_FILE):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_empty_report_rejected(tmp_path):
    with pytest.raises(DomainError):
        write_report([], tmp_path)


def test_report_needs_metrics_file(tmp_path):
    with pytest.raises(ProtocolError):
        read_report(tmp_path)


def test_compare_sorts_and_flags_reference():
    rows = [Summary("NT", 18.0, 0.6, 0, 1.0, ()), Summary("UB", 27.0, 0.9, 0, 2.0, ()),
            Summary("CLNeRF", 26.5, 0.88, 0, 3.0, ())]
    lines = compare_summaries(rows).splitlines()
    assert [ln.split()[0] for ln in lines[1:]] == ["UB", "CLNeRF", "NT"]
    assert lines[1].endswith("(reference)") and "(reference)" not in lines[2]
