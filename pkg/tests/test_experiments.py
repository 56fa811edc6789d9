import numpy as np
import pytest

from srgd import experiments as ex


def test_default_configs():
    for name in ex.EXPERIMENTS:
        cfg = ex.ExperimentConfig(experiment=name)
        assert cfg.settings == tuple(s.name for s in cfg.protocol.settings)
        assert "ours" in cfg.settings
        assert len(cfg.seeds) >= 2


def test_config_validation():
    with pytest.raises(ValueError):
        ex.ExperimentConfig(experiment="nope")
    with pytest.raises(ValueError):
        ex.ExperimentConfig(settings=("bogus",))
    with pytest.raises(ValueError):
        ex.ExperimentConfig(eval_settings=("bias9",))
    with pytest.raises(ValueError):
        ex.ExperimentConfig(seeds=(1, 1))
    with pytest.raises(ValueError):
        ex.ExperimentConfig(n_test=0)


def test_config_items_round_trip():
    cfg = ex.ExperimentConfig(experiment="mask", seeds=(3, 4), lr=5e-4, settings=("ours",))
    assert ex.config_from_items(cfg.as_items()) == cfg
    layered = ex.config_from_items({"max_steps": "10"}, cfg)
    assert layered.max_steps == 10 and layered.settings == ("ours",)
    switched = ex.config_from_items({"experiment": "multimodal"}, cfg)
    assert switched.settings == ("ncc", "cr", "mi", "ours")
    with pytest.raises(ValueError):
        ex.config_from_items({"colour": "red"})


def test_split_seeds_are_disjoint():
    seeds = ex.split_seeds(ex.ExperimentConfig(n_train=40, n_val=8, n_test=16))
    flat = [s for v in seeds.values() for s in v]
    assert len(flat) == len(set(flat)) == 64


def _tiny(experiment="artifact", **kw):
    base = dict(experiment=experiment, n_train=2, n_val=1, n_test=2, size=32,
                deform_amplitude=2.0, deform_sigma=5.0, seeds=(0, 1), max_steps=4,
                patience_steps=4, val_every=2)
    base.update(kw)
    return ex.ExperimentConfig(**base)


def test_dataset_is_deterministic_and_round_trips(tmp_path):
    cfg = _tiny("mask")
    data = ex.build_dataset(cfg)
    again = ex.build_dataset(cfg, workers=2)
    ex.write_dataset(tmp_path, cfg, data)
    cfg2, back = ex.read_dataset(tmp_path)
    assert cfg2 == cfg
    for other in (again, back):
        for split in ex.SPLITS:
            for (f1, m1), (f2, m2) in zip(data[split], other[split]):
                assert np.array_equal(f1.img, f2.img) and np.array_equal(m1.img, m2.img)
                assert np.array_equal(m1.gt_disp.data, m2.gt_disp.data)


def test_mask_protocol_uses_lung_phantoms():
    (f, m), = ex.build_dataset(_tiny("mask", n_train=1, n_test=1))["val"]
    assert f.clutter.any()
    assert not np.array_equal(f.masked(), f.img)


def test_eval_inputs():
    cfg = _tiny("artifact")
    f, m = ex.build_dataset(cfg)["test"][0]
    a, b = ex.eval_inputs(cfg, "bias0", f, m)
    assert np.array_equal(a, f.img) and np.array_equal(b, m.img)
    a, b = ex.eval_inputs(cfg, "bias3", f, m)
    assert np.array_equal(a, f.biased(3.0)) and np.array_equal(b, m.biased(3.0))
    mcfg = _tiny("mask")
    f, m = ex.build_dataset(mcfg)["test"][0]
    a, b = ex.eval_inputs(mcfg, "mixed", f, m)
    assert np.array_equal(a, f.masked()) and np.array_equal(b, m.img)
    ccfg = _tiny("multimodal")
    f, m = ex.build_dataset(ccfg)["test"][0]
    a, b = ex.eval_inputs(ccfg, "standard", f, m)
    assert np.array_equal(a, f.img) and np.array_equal(b, m.modality_b)


def test_run_experiment_is_reproducible(tmp_path):
    cfg = _tiny("multimodal", settings=("ncc", "ours"))
    data = ex.build_dataset(cfg)
    a = ex.run_experiment(cfg, data, tmp_path / "a")
    b = ex.run_experiment(cfg, data, tmp_path / "b", workers=2)
    assert [p.name for p in a] == [p.name for p in b]
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes()
        ca, cb = (p.with_name(p.name.replace("_eval.csv", ".ckpt")) for p in (pa, pb))
        assert ca.read_bytes() == cb.read_bytes()
    from srgd.io import read_csv
    rows = read_csv(a[0])
    assert len(rows) == cfg.n_test * len(cfg.eval_settings)
    assert rows[0]["setting"] == "ncc" and rows[0]["seed"] == "0"


def test_default_workers(monkeypatch):
    monkeypatch.delenv("SRGD_WORKERS", raising=False)
    assert ex.default_workers() == 1
    monkeypatch.setenv("SRGD_WORKERS", "3")
    assert ex.default_workers() == 3
    monkeypatch.setenv("SRGD_WORKERS", "many")
    with pytest.raises(ValueError):
        ex.default_workers()
