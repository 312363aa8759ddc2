import csv
import json
from pathlib import Path

import numpy as np
import pytest

from coda_forge import core, envs, pipeline

TINY = """
[env]
transition_noise = 0.01
[data]
n_per_kind = 300
val_count = 100
seed = 3
[parent]
dists = emp, rand, dyna, mocoda, mocoda_u, mocoda_p
k = 4
em_max_iter = 20
target_total = 1500
[dynamics]
width = 8
epochs = 2
patience = 2
n_members = 2
eval_size = 300
[rl]
dists = emp, mocoda
iters = 2
subsample = 500
steps_per_iter = 5
episodes = 3
[output]
dir = out
"""


def _cfg(tmp_path, **over):
    cfg = pipeline.PipelineConfig.from_string(TINY, base_dir=tmp_path)
    return pipeline.PipelineConfig(**{**cfg.__dict__, **over})


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("pipe")
    cfg = _cfg(base)
    return cfg, pipeline.run_pipeline(cfg)


def _read_csv(path):
    with open(path) as f:
        return list(csv.reader(f))


def test_config_round_trip(tmp_path):
    cfg = _cfg(tmp_path)
    again = pipeline.PipelineConfig.from_string(cfg.to_string())
    assert again == cfg
    assert cfg.out_dir == str(tmp_path / "out")
    assert cfg.fqi.iters == 2 and cfg.hyper.width == 8 and cfg.env.transition_noise == 0.01


def test_config_validation():
    with pytest.raises(ValueError, match="unknown distribution"):
        pipeline.PipelineConfig(dists=("emp", "bogus"))
    with pytest.raises(ValueError, match="not generated"):
        pipeline.PipelineConfig(dists=("emp",), rl_dists=("emp", "mocoda"))
    with pytest.raises(ValueError):
        pipeline.PipelineConfig.from_string("[env]\nname = pong\n")
    cfg = pipeline.PipelineConfig.from_string("[rl]\ndists = emp\nbc = 0.7\n[parent]\ndists = emp\n")
    assert cfg.fqi.bc_weight == 0.7


def test_named_streams_are_stable_and_distinct():
    assert pipeline.stream_seed(0, "data") == pipeline.stream_seed(0, "data")
    names = ["data", "parents", "split", "dyn-unfactored", "augment-mocoda"]
    assert len({pipeline.stream_seed(0, n) for n in names}) == len(names)
    assert pipeline.stream_seed(0, "data") != pipeline.stream_seed(1, "data")


def test_every_stage_ran(tiny_run):
    cfg, m = tiny_run
    names = [s["stage"] for s in m["stages"]]
    assert names[:2] == ["gen-data", "fit-parent"]
    assert all(s["status"] == "ok" for s in m["stages"])
    assert {f"augment-{d}" for d in cfg.dists} <= set(names)
    assert set(m["metrics"]["mse"]) == set(cfg.archs)
    assert set(m["metrics"]["rl"]) == {"emp", "mocoda"}


def test_augmented_datasets_have_exact_ratios(tiny_run):
    cfg, m = tiny_run
    out = Path(cfg.out_dir)
    emp = core.load_jsonl(envs.NAV2D_SPEC, out / "emp.jsonl")
    assert len(emp) == 600
    for d in cfg.dists:
        ds = core.load_jsonl(envs.NAV2D_SPEC, out / f"aug-{d}.jsonl")
        assert len(ds) == cfg.target_total
        if d == "emp":
            assert np.array_equal(ds.sa[600:1200], emp.sa)
            assert m["ratios"][d] == {"real": 1500, "augmented": 0}
        else:
            assert m["ratios"][d] == {"real": 600, "augmented": 900}
            assert np.array_equal(ds.sa[:600], emp.sa)
            assert np.array_equal(np.load(out / f"parents-{d}.npy"), ds.sa[600:])


def test_mocoda_p_parents_respect_filter(tiny_run):
    cfg, _ = tiny_run
    rows = np.load(Path(cfg.out_dir) / "parents-mocoda_p.npy")
    assert np.all(np.abs(rows[:, 0] - rows[:, 1]) < cfg.prio_band)


def test_result_tables(tiny_run):
    cfg, m = tiny_run
    out = Path(cfg.out_dir)
    dyn = _read_csv(out / "results-dynamics.csv")
    assert dyn[0] == ["arch", *cfg.dists] and len(dyn) == 4
    assert float(dyn[1][1]) == pytest.approx(m["metrics"]["mse"][dyn[1][0]]["emp"], rel=1e-5)
    rl_rows = _read_csv(out / "results-rl.csv")
    assert rl_rows[0] == ["agent", "emp", "mocoda"] and rl_rows[1][0] == "fqi-bc"


def test_second_run_is_fully_cached(tiny_run):
    cfg, first = tiny_run
    again = pipeline.run_pipeline(cfg)
    assert all(s.get("cached") for s in again["stages"])
    assert pipeline.manifest_hashes(again) == pipeline.manifest_hashes(first)


def test_changed_section_reruns_only_downstream(tmp_path):
    cfg = _cfg(tmp_path, dists=("emp", "mocoda"))
    pipeline.run_pipeline(cfg)
    cfg2 = pipeline.PipelineConfig(**{**cfg.__dict__, "episodes": 4})
    m = pipeline.run_pipeline(cfg2)
    rerun = {s["stage"] for s in m["stages"] if not s.get("cached")}
    assert rerun == {"train-agent-emp", "train-agent-mocoda"}


def test_same_config_fresh_dir_reproduces_hashes(tmp_path):
    a = pipeline.run_pipeline(_cfg(tmp_path / "a", dists=("emp", "mocoda")))
    b = pipeline.run_pipeline(_cfg(tmp_path / "b", dists=("emp", "mocoda")))
    assert pipeline.manifest_hashes(a) == pipeline.manifest_hashes(b)


def test_failed_stage_is_recorded_and_downstream_skipped(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("no convergence")

    monkeypatch.setattr(pipeline.dynamics, "fit_regressor", boom)
    m = pipeline.run_pipeline(_cfg(tmp_path, dists=("emp", "mocoda")))
    st = {s["stage"]: s for s in m["stages"]}
    assert st["fit-parent"]["status"] == "ok"
    assert st["train-dynamics-unfactored"]["status"] == "failed"
    assert "no convergence" in st["train-dynamics-unfactored"]["error"]
    assert st["train-agent-mocoda"]["status"] == "skipped"
    assert json.loads((tmp_path / "out" / "manifest.json").read_text())["stages"]


def test_emit_tables_shapes(tiny_run, tmp_path):
    cfg, m = tiny_run
    paths = pipeline.emit_tables([m, m], tmp_path)
    dyn = _read_csv(paths[0])
    assert len(dyn) == 4 and dyn[0][1:] == ["emp", "dyna", "rand", "mocoda", "mocoda_u", "mocoda_p"]
    assert dyn[1][1].endswith("+- 0")
    rl_rows = _read_csv(paths[1])
    assert rl_rows[0] == ["agent", "emp", "mocoda"] and len(rl_rows) == 2
    assert len(_read_csv(paths[2])) == 1 + 2 * 3 * 6
    empty = pipeline.emit_tables([{"stages": []}], tmp_path / "e")
    assert _read_csv(empty[0]) == [["arch", *pipeline.TABLE_DISTS]]
