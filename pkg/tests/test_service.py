"""HTTP facade tests.

Every route is exercised against the in-process application with desk-scale
configs; the transport must add nothing and lose nothing, so trained /eval
responses are compared against the core runner's numbers for exact equality.
"""

import numpy as np
import pytest
from fastapi.testclient import TestClient

from conftest import make_tiny_config
from srfseg import __version__
from srfseg import config as cfgmod
from srfseg.service.app import create_app
from srfseg.train import run_eval, run_train

from srfseg.gradsuite import THRESHOLD


@pytest.fixture(scope="module")
def client():
    return TestClient(create_app(), raise_server_exceptions=False)


def _config_text(out, **overrides):
    return cfgmod.dumps(make_tiny_config(out, **overrides))


# ---------------------------------------------------------------------------
# health


def test_health_reports_version(client):
    r = client.get("/health")
    assert r.status_code == 200
    assert r.json() == {"status": "ok", "version": __version__}


# ---------------------------------------------------------------------------
# gradcheck


def test_gradcheck_subset_passes(client):
    r = client.post("/gradcheck", json={"targets": ["add", "relu"]})
    assert r.status_code == 200
    body = r.json()
    assert body["all_passed"] is True
    assert body["threshold"] == THRESHOLD
    assert sorted(row["target"] for row in body["rows"]) == ["add", "relu"]
    assert all(row["max_rel_error"] < THRESHOLD for row in body["rows"])


def test_gradcheck_corruption_is_flagged(client):
    r = client.post("/gradcheck", json={"targets": ["add", "relu"], "corrupt": "relu"})
    assert r.status_code == 200
    body = r.json()
    assert body["all_passed"] is False
    flags = {row["target"]: row["passed"] for row in body["rows"]}
    assert flags == {"add": True, "relu": False}


def test_gradcheck_unknown_target_is_client_error(client):
    r = client.post("/gradcheck", json={"targets": ["warp_drive"]})
    assert r.status_code == 400
    assert "warp_drive" in r.json()["detail"]


# ---------------------------------------------------------------------------
# train and eval


def test_train_then_eval_matches_core_runner(client, tmp_path):
    text = _config_text(tmp_path / "svc")
    r = client.post("/train", json={"config_text": text})
    assert r.status_code == 200
    body = r.json()
    assert body["steps"] == 4
    assert body["checkpoint"].endswith("ckpt_final.srf")

    r2 = client.post("/eval", json={"config_text": text,
                                    "checkpoint": body["checkpoint"],
                                    "out": str(tmp_path / "svc_eval")})
    assert r2.status_code == 200
    served = r2.json()

    # the same evaluation through the core runner, transported losslessly
    config = cfgmod.resolve(config_text=text, out=str(tmp_path / "core_eval"))
    direct = run_eval(config, checkpoint=body["checkpoint"], log=None)
    assert served["miou"] == direct["miou"]
    assert served["boundary_f_tol1"] == direct["boundary_f_tol1"]
    assert served["boundary_f_tol3"] == direct["boundary_f_tol3"]
    assert served["scenes"] == direct["scenes"]


def test_eval_oracle_is_perfect(client, tmp_path):
    text = _config_text(tmp_path / "oracle")
    r = client.post("/eval", json={"config_text": text, "oracle": True})
    assert r.status_code == 200
    body = r.json()
    assert body["miou"] == 1.0
    assert body["boundary_f_tol1"] == 1.0


def test_eval_absent_class_serializes_as_null(client, tmp_path):
    # a shapeless corpus only ever contains the background class, so under
    # the oracle every other per-class IoU is undefined and must arrive as
    # JSON null rather than NaN
    text = _config_text(tmp_path / "empty", data={"shapes": (0, 0)})
    r = client.post("/eval", json={"config_text": text, "oracle": True})
    assert r.status_code == 200
    per_class = r.json()["per_class"]
    assert per_class[0] == 1.0
    assert all(v is None for v in per_class[1:])


def test_bad_config_value_is_client_error(client):
    r = client.post("/train", json={"config_text": "train.steps = soon\n"})
    assert r.status_code == 400
    assert "train.steps" in r.json()["detail"]


def test_config_syntax_error_carries_line_number(client):
    text = "seed = 0\nseed = 1\n"
    r = client.post("/train", json={"config_text": text})
    assert r.status_code == 400
    assert "line 2" in r.json()["detail"]


def test_unwritable_out_is_server_error(client, tmp_path):
    text = _config_text(tmp_path / "x")
    r = client.post("/train", json={"config_text": text, "out": "/dev/null/run"})
    assert r.status_code == 500
    assert "not writable" in r.json()["detail"]


def test_missing_checkpoint_is_server_error(client, tmp_path):
    text = _config_text(tmp_path / "miss")
    r = client.post("/eval", json={"config_text": text,
                                   "checkpoint": str(tmp_path / "nope.srf")})
    assert r.status_code == 500


# ---------------------------------------------------------------------------
# ablate


def test_ablate_reports_four_variants(client, tmp_path):
    text = _config_text(tmp_path / "abl", train={"steps": 2, "checkpoint_interval": 0})
    r = client.post("/ablate", json={"config_text": text})
    assert r.status_code == 200
    body = r.json()
    assert [row["variant"] for row in body["rows"]] == ["baseline", "+srm", "+crm", "both"]
    assert body["csv"].endswith("ablation.csv")
    assert "baseline" in body["table_text"]
    for row in body["rows"]:
        assert 0.0 <= row["miou_mean"] <= 1.0
        assert row["miou_std"] == 0.0  # single seed


def test_variant_override_reaches_training(client, tmp_path):
    text = _config_text(tmp_path / "var")
    r = client.post("/train", json={"config_text": text,
                                    "variant": "upsampler=bilinear,context=none",
                                    "out": str(tmp_path / "var_out")})
    assert r.status_code == 200
    saved = cfgmod.load(str(tmp_path / "var_out" / "config.txt"))
    assert saved.variant.upsampler == "bilinear"
    assert saved.variant.context == "none"
