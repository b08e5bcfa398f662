"""Training loop, evaluation protocol, and run artifacts at tiny scale."""

import os

import numpy as np
import pytest

from srfseg import config as cfgmod
from srfseg.engine.checkpoint import load_checkpoint
from srfseg.errors import CheckpointMismatchError, DivergenceError
from srfseg.train import (VARIANT_ROWS, batch_loss, build_model, run_ablate,
                          run_eval, run_train)
from tests.conftest import make_tiny_config


def test_run_train_writes_expected_artifacts(tiny_config):
    ckpt = run_train(tiny_config, log=None)
    out = tiny_config.out
    assert ckpt == os.path.join(out, "ckpt_final.srf")
    assert os.path.exists(ckpt)
    assert os.path.exists(os.path.join(out, "ckpt_000002.srf"))  # interval 2
    assert os.path.exists(os.path.join(out, "config.txt"))
    csv = open(os.path.join(out, "metrics.csv")).read().splitlines()
    assert csv[0] == "step,ce,cl,total,lr"
    assert len(csv) == 1 + tiny_config.train.steps
    # persisted config reproduces the run settings
    assert cfgmod.load(os.path.join(out, "config.txt")) == tiny_config


def test_final_step_checkpoint_not_duplicated(tmp_path):
    config = make_tiny_config(tmp_path / "r", train={"steps": 4, "batch_size": 2,
                                                     "checkpoint_interval": 4})
    run_train(config, log=None)
    assert not os.path.exists(os.path.join(config.out, "ckpt_000004.srf"))
    assert os.path.exists(os.path.join(config.out, "ckpt_final.srf"))


def test_training_updates_parameters(tiny_config):
    ckpt = run_train(tiny_config, log=None)
    state = load_checkpoint(ckpt)
    store, _, _ = build_model(tiny_config)
    moved = sum(1 for p in store if not np.array_equal(p.data, state[p.name]))
    assert moved > 0


def test_zero_lr_leaves_parameters_bit_identical(tmp_path):
    config = make_tiny_config(tmp_path / "r", optim={"lr": 0.0})
    ckpt = run_train(config, log=None)
    state = load_checkpoint(ckpt)
    store, _, _ = build_model(config)
    for p in store:
        assert np.array_equal(p.data, state[p.name]), p.name


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported_with_step(tmp_path):
    # normalization layers shrug off big steps; it takes an absurd one to
    # overflow float32 into NaN, which must then stop the run by name
    config = make_tiny_config(tmp_path / "r", optim={"lr": 1e30},
                              train={"steps": 6, "batch_size": 2,
                                     "checkpoint_interval": 0})
    with pytest.raises(DivergenceError, match=r"step \d+"):
        run_train(config, log=None)


def test_batch_loss_reports_parts_and_total(tiny_config):
    store, net, embed = build_model(tiny_config)
    spec = cfgmod.scene_spec(tiny_config)
    from srfseg.train import _batch
    images, labels = _batch(spec, [0, 1], np.float32)
    report = batch_loss(net, embed, images, labels, tiny_config, anchor_seed=0)
    assert np.isfinite(float(report.total.data))
    assert abs(float(report.total.data) -
               (float(report.ce.data) + tiny_config.loss.lam * float(report.cl.data))) < 1e-5
    assert report.tau == tiny_config.loss.tau


# ---------------------------------------------------------------------------
# evaluation


def test_oracle_eval_is_perfect(tiny_config):
    result = run_eval(tiny_config, oracle=True, log=None)
    assert result["miou"] == 1.0
    assert result["boundary_f_tol1"] == 1.0
    assert result["scenes"] == tiny_config.data.eval_scenes
    assert os.path.exists(os.path.join(tiny_config.out, "eval.csv"))


def test_eval_uses_held_out_scene_range(tmp_path, monkeypatch):
    config = make_tiny_config(tmp_path / "r")
    seen = []
    import srfseg.train as trainmod
    original = trainmod.generate_scene

    def spy(spec, index):
        seen.append(index)
        return original(spec, index)

    monkeypatch.setattr(trainmod, "generate_scene", spy)
    run_eval(config, oracle=True, log=None)
    start = config.data.train_scenes
    assert sorted(seen) == list(range(start, start + config.data.eval_scenes))


def test_eval_loads_checkpoint_and_differs_from_fresh(tiny_config):
    ckpt = run_train(tiny_config, log=None)
    sub = tiny_config.model_copy(update={"out": tiny_config.out + "/e1"})
    trained = run_eval(sub, checkpoint=ckpt, log=None)
    sub2 = tiny_config.model_copy(update={"out": tiny_config.out + "/e2"})
    fresh = run_eval(sub2, checkpoint=None, log=None)
    assert trained["scenes"] == fresh["scenes"]
    assert 0.0 <= trained["miou"] <= 1.0
    # four steps on six scenes still separate trained from untrained weights
    assert trained != fresh


def test_eval_rejects_mismatched_checkpoint(tmp_path):
    config = make_tiny_config(tmp_path / "r", variant={"upsampler": "bilinear",
                                                       "context": "none"})
    ckpt = run_train(config, log=None)
    full = make_tiny_config(tmp_path / "r2")
    with pytest.raises(CheckpointMismatchError, match="missing parameter"):
        run_eval(full, checkpoint=ckpt, log=None)


def test_eval_dump_writes_readable_files(tiny_config):
    run_eval(tiny_config, oracle=True, dump=True, log=None)
    pred_dir = os.path.join(tiny_config.out, "predictions")
    names = sorted(os.listdir(pred_dir))
    start = tiny_config.data.train_scenes
    assert f"scene_{start:04d}.ppm" in names
    assert f"pred_{start:04d}.pgm" in names
    from srfseg.data import read_labels
    first = read_labels(os.path.join(pred_dir, f"pred_{start:04d}.pgm"))
    assert first.shape == tuple(tiny_config.data.size)


# ---------------------------------------------------------------------------
# the four-variant runner


def test_run_ablate_produces_table_and_csv(tmp_path):
    config = make_tiny_config(tmp_path / "abl", train={"steps": 2, "batch_size": 2,
                                                       "checkpoint_interval": 0})
    result = run_ablate(config, log=None)
    assert set(result["miou"]) == {name for name, _, _ in VARIANT_ROWS}
    csv = open(result["csv"]).read().splitlines()
    assert csv[0].startswith("variant,upsampler,context,seeds,miou_mean")
    assert len(csv) == 5
    table = open(result["table"]).read()
    assert "baseline" in table and "+srm" in table and "both" in table
    # single-seed runs carry zero sample deviation
    for name, _, _ in VARIANT_ROWS:
        assert result["miou"][name][1] == 0.0


def test_untrained_variants_agree_exactly(tmp_path):
    # at zero steps every decoder variant reports identical metrics: the four
    # rows differ only once training moves the offset/context weights
    config = make_tiny_config(tmp_path / "abl0",
                              train={"steps": 0, "batch_size": 2,
                                     "checkpoint_interval": 0})
    result = run_ablate(config, log=None)
    mious = [result["miou"][name][0] for name, _, _ in VARIANT_ROWS]
    assert len(set(mious)) == 1
    bf1s = [result["boundary_f_tol1"][name][0] for name, _, _ in VARIANT_ROWS]
    assert len(set(bf1s)) == 1
