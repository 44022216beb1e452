"""Run configs, training loop artifacts, resume, prediction."""

import json

import numpy as np
import pytest

from xlunet.data import generate_dataset, load_case, load_dataset
from xlunet.network import build_network
from xlunet.tensor import ContractError, Tensor
from xlunet.train import (
    RunConfig,
    load_checkpoint,
    load_run_config,
    predict_volume,
    restore_network,
    run_config_from_dict,
    run_eval,
    run_training,
)


def _tiny_cfg(**kw):
    base = dict(
        patch_size=(32, 32),
        num_classes=3,
        num_stages=2,
        base_channels=4,
        variant="bot",
        heads=2,
        batch_size=2,
        max_epochs=2,
        steps_per_epoch=2,
        seed=3,
    )
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("ds")
    generate_dataset(d, num_cases=3, classes=3, dims=2, size=(32, 32), seed=2)
    return d


# ---------------------------------------------------------------------------
# config parsing


def test_config_json_roundtrip(tmp_path):
    cfg = _tiny_cfg()
    p = tmp_path / "run.json"
    p.write_text(json.dumps(cfg.to_dict()))
    back = load_run_config(p)
    assert back == cfg


def test_unknown_keys_rejected():
    with pytest.raises(ContractError, match="momentum"):
        run_config_from_dict({"patch_size": [32, 32], "num_classes": 2, "momentum": 0.9})


def test_missing_required_keys_rejected():
    with pytest.raises(ContractError, match="patch_size"):
        run_config_from_dict({"num_classes": 2})


def test_wrong_types_named():
    with pytest.raises(ContractError, match="batch_size"):
        run_config_from_dict(
            {"patch_size": [32, 32], "num_classes": 2, "batch_size": "four"}
        )
    with pytest.raises(ContractError, match="batch_size"):
        run_config_from_dict(
            {"patch_size": [32, 32], "num_classes": 2, "batch_size": True}
        )


def test_invalid_values_rejected():
    with pytest.raises(ContractError):
        _tiny_cfg(schedule="cosine").validate()
    with pytest.raises(ContractError):
        _tiny_cfg(patch_size=(30, 32)).validate()
    with pytest.raises(ContractError):
        _tiny_cfg(force_foreground_prob=1.5).validate()
    with pytest.raises(ContractError):
        _tiny_cfg(early_stop_dice=0.0).validate()


def test_bad_json_is_contract_error(tmp_path):
    p = tmp_path / "broken.json"
    p.write_text("{not json")
    with pytest.raises(ContractError, match="JSON"):
        load_run_config(p)


# ---------------------------------------------------------------------------
# training artifacts


def test_training_writes_log_and_checkpoints(dataset, tmp_path):
    cfg = _tiny_cfg()
    res = run_training(cfg, dataset, tmp_path / "run")
    assert res.epochs_completed == 2 and res.global_step == 4
    log = (tmp_path / "run" / "train_log.csv").read_text().strip().split("\n")
    assert log[0] == "step,epoch,lr,loss,seconds"
    assert len(log) == 5
    first = log[1].split(",")
    assert first[0] == "1" and first[1] == "0"
    assert float(first[2]) == pytest.approx(cfg.learning_rate)
    assert np.isfinite(float(first[3]))
    for sub in ("latest", "best"):
        m = load_checkpoint(tmp_path / "run" / "checkpoints" / sub)
        assert m["global_step"] <= 4
        net, back_cfg = restore_network(m)
        assert back_cfg == cfg


def test_config_dataset_mismatch_is_rejected(dataset, tmp_path):
    with pytest.raises(ContractError, match="classes"):
        run_training(_tiny_cfg(num_classes=2), dataset, tmp_path / "x")


def test_resume_config_mismatch_rejected(dataset, tmp_path):
    run_training(_tiny_cfg(), dataset, tmp_path / "run")
    ckpt = tmp_path / "run" / "checkpoints" / "latest"
    with pytest.raises(ContractError, match="config"):
        run_training(_tiny_cfg(seed=99), dataset, tmp_path / "run2", resume_from=ckpt)


def test_interrupted_resume_is_bit_exact(dataset, tmp_path):
    base = dict(max_epochs=3, augment_mirror=True)
    run_training(_tiny_cfg(**base), dataset, tmp_path / "a")

    class Stop(Exception):
        pass

    seen = []

    def boom(msg):
        seen.append(msg)
        if len(seen) == 1:
            raise Stop

    with pytest.raises(Stop):
        run_training(_tiny_cfg(**base), dataset, tmp_path / "b", log=boom)
    run_training(
        _tiny_cfg(**base),
        dataset,
        tmp_path / "b",
        resume_from=tmp_path / "b" / "checkpoints" / "latest",
    )
    ma = load_checkpoint(tmp_path / "a" / "checkpoints" / "latest")
    mb = load_checkpoint(tmp_path / "b" / "checkpoints" / "latest")
    na, _ = restore_network(ma)
    nb, _ = restore_network(mb)
    for k in na.params:
        assert np.array_equal(na.params[k].data, nb.params[k].data), k
    assert ma["rng"] == mb["rng"]
    assert ma["global_step"] == mb["global_step"]


@pytest.mark.filterwarnings("ignore:overflow", "ignore:invalid value")
def test_nan_loss_aborts_with_step_number(dataset, tmp_path):
    # an absurd learning rate detonates the weights within a few steps
    cfg = _tiny_cfg(learning_rate=1e18, max_epochs=5, steps_per_epoch=5)
    with pytest.raises(RuntimeError, match=r"step \d+"):
        run_training(cfg, dataset, tmp_path / "boom")


def test_checkpoint_dir_must_exist(tmp_path):
    with pytest.raises(ContractError, match="manifest"):
        load_checkpoint(tmp_path / "nothing")


# ---------------------------------------------------------------------------
# prediction


def test_predict_whole_volume_and_tiled_agree(dataset, tmp_path):
    cfg = _tiny_cfg()
    run_training(cfg, dataset, tmp_path / "run")
    net, _ = restore_network(load_checkpoint(tmp_path / "run" / "checkpoints" / "latest"))
    info = load_dataset(dataset)
    img, _ = load_case(info, "case_000")
    whole = predict_volume(net, img, tile=False)
    assert whole.shape == (32, 32) and whole.dtype == np.int32
    # tiling covers the volume with overlapping windows; for a 32x32 volume
    # with a 32x32 patch there is exactly one window, so results match
    tiled = predict_volume(net, img, tile=True)
    np.testing.assert_array_equal(whole, tiled)


def test_predict_rejects_indivisible_without_tile(dataset, tmp_path):
    run_training(_tiny_cfg(), dataset, tmp_path / "run")
    net, _ = restore_network(load_checkpoint(tmp_path / "run" / "checkpoints" / "latest"))
    odd = np.zeros((1, 20, 32), dtype=np.float32)  # 20 % 8 != 0
    with pytest.raises(ContractError, match="tile"):
        predict_volume(net, odd, tile=False)
    out = predict_volume(net, odd, tile=True)
    assert out.shape == (20, 32)


def test_predict_tiled_on_small_volume_pads_and_crops(dataset, tmp_path):
    run_training(_tiny_cfg(), dataset, tmp_path / "run")
    net, _ = restore_network(load_checkpoint(tmp_path / "run" / "checkpoints" / "latest"))
    small = np.zeros((1, 10, 9), dtype=np.float32)
    out = predict_volume(net, small, tile=True)
    assert out.shape == (10, 9)


def test_predict_validates_channels(dataset, tmp_path):
    run_training(_tiny_cfg(), dataset, tmp_path / "run")
    net, _ = restore_network(load_checkpoint(tmp_path / "run" / "checkpoints" / "latest"))
    with pytest.raises(ContractError):
        predict_volume(net, np.zeros((2, 32, 32), dtype=np.float32))


# ---------------------------------------------------------------------------
# eval orchestration


def test_run_eval_reports_and_exit_codes(dataset, tmp_path, capsys):
    info = load_dataset(dataset)
    pred_dir = tmp_path / "pred"
    pred_dir.mkdir()
    from xlunet.data import write_xten

    for cid in info.cases:
        _, lab = load_case(info, cid)
        write_xten(pred_dir / f"{cid}.xten", lab)  # predict the truth
    out = tmp_path / "rep.jsonl"
    code = run_eval(pred_dir, dataset / "labels", out)
    assert code == 0
    rows = [json.loads(line) for line in out.read_text().strip().split("\n")]
    assert len(rows) == len(info.cases)
    for row in rows:
        for cls_metrics in row["classes"].values():
            if cls_metrics["dsc"] is not None:
                assert cls_metrics["dsc"] == 1.0
    assert (tmp_path / "rep.csv").exists()

    # drop one prediction: exit code 1 and a warning, case excluded
    (pred_dir / f"{info.cases[0]}.xten").unlink()
    code = run_eval(pred_dir, dataset / "labels", tmp_path / "rep2.jsonl")
    assert code == 1
    err = capsys.readouterr().err
    assert info.cases[0] in err
