import json
import math

import numpy as np
import pytest
import torch

from waferqa import trainer as trainer_mod
from waferqa.config import LABELS, RunConfig, TrainConfig, config_from_dict
from waferqa.errors import ConfigError, FormatError, InputError, NumericError
from waferqa.trainer import (build_model, cosine_lr, load_checkpoint, plan_steps, read_checkpoint, save_checkpoint,
                             train)
from waferqa.wafersynth import derive_seed, generate_sample

SMALL = {"model": {"calibration_per_class": 4}, "train": {"batch_size": 4, "epochs": 2}}


@pytest.fixture(scope="module")
def samples():
    cfg = RunConfig().gen
    out, k = [], 0
    for label in LABELS:
        for _ in range(4):
            out.append(generate_sample(derive_seed(5, k), label, cfg, f"w{k:04d}"))
            k += 1
    return out


@pytest.fixture(scope="module")
def ten_steps(samples, tmp_path_factory):
    out = tmp_path_factory.mktemp("ten")
    return train(config_from_dict(SMALL), samples, out_dir=out, max_steps=10), out


# -- schedule --------------------------------------------------------------------------

def test_cosine_lr_endpoints_and_midpoint():
    cfg = TrainConfig()
    assert cosine_lr(0, 100, cfg) == 1e-4
    assert cosine_lr(100, 100, cfg) == 1e-6
    assert cosine_lr(50, 100, cfg) == pytest.approx(5.05e-5, rel=1e-12)
    lrs = [cosine_lr(s, 100, cfg) for s in range(101)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_cosine_lr_errors():
    with pytest.raises(InputError):
        cosine_lr(0, 0, TrainConfig())
    with pytest.raises(InputError):
        cosine_lr(11, 10, TrainConfig())


def test_plan_steps():
    assert plan_steps(337, TrainConfig()) == (430, 645)
    n_a, total = plan_steps(20, TrainConfig(batch_size=4, epochs=1))
    assert (n_a, total) == (5, 7)


# -- training ----------------------------------------------------------------------------

def test_epochs_zero_is_a_config_error(samples):
    with pytest.raises(ConfigError):
        train(config_from_dict({"train": {"epochs": 0}}), samples)


def test_same_seed_gives_identical_losses(ten_steps, samples):
    result, _ = ten_steps
    again = train(config_from_dict(SMALL), samples, max_steps=10)
    assert [r["total"] for r in result.log] == [r["total"] for r in again.log]
    assert len(result.log) == 10


def test_frozen_parameters_untouched(ten_steps):
    result, _ = ten_steps
    fresh = build_model(config_from_dict(SMALL))
    for (name, a), (_, b) in zip(result.model.frozen.state_dict().items(), fresh.frozen.state_dict().items()):
        assert torch.equal(a, b), name
    assert torch.equal(result.model.v_lab_clip, fresh.v_lab_clip)


def test_expert_guides_fixed_and_prompts_trained(ten_steps):
    result, _ = ten_steps
    for name in ("image_expert", "text_expert"):
        exp = result.model.enhancement[name]
        assert not torch.equal(exp.prompts.detach(), exp.guide_snapshot)


def test_run_artifacts(ten_steps):
    result, out = ten_steps
    echo = json.loads((out / "run_config.json").read_text())
    assert echo == config_from_dict(SMALL).to_dict()
    rows = [json.loads(line) for line in (out / "train_log.jsonl").read_text().splitlines()]
    assert [r["tag"] for r in rows] == list("AABAABAABA")
    assert set(rows[0]) >= {"step", "tag", "lr", "focal", "dice", "ce1", "ce2", "gate", "total"}
    assert rows[0]["lr"] == 1e-4
    # B steps carry no detection terms
    assert rows[2]["focal"] == rows[2]["dice"] == rows[2]["ce1"] == 0.0


def test_nan_loss_names_term_and_step(samples, monkeypatch):
    real = trainer_mod.compute_losses

    def poisoned(model, batch, data):
        terms = real(model, batch, data)
        terms["dice"] = terms["dice"] * float("nan")
        return terms

    monkeypatch.setattr(trainer_mod, "compute_losses", poisoned)
    with pytest.raises(NumericError) as exc:
        train(config_from_dict(SMALL), samples, max_steps=3)
    assert exc.value.term == "dice" and exc.value.step == 0


def test_corrector_off_means_unit_gate(samples):
    cfg = config_from_dict({**SMALL, "ablation": {"use_corrector": False}})
    model = build_model(cfg)
    t_vis = torch.randn(2, 20, cfg.model.llm_dim)
    a, _ = model.gate(t_vis, torch.randn(2, 3, cfg.model.llm_dim), torch.ones(2, 3, dtype=torch.bool))
    assert torch.equal(a, torch.ones(2))


def test_ablation_removes_components(samples):
    cfg = config_from_dict({**SMALL, "ablation": {"use_pm": False, "use_experts": False}})
    model = build_model(cfg)
    v_img, v_txt = model.encode(np.stack([s.image for s in samples[:2]]), [s.text_marks for s in samples[:2]])
    det = model.detect(v_img, v_txt)
    assert det.n_expert == 0 and torch.equal(det.t_img, v_img)


# -- checkpoint ------------------------------------------------------------------------------

def test_checkpoint_roundtrip_is_bit_exact(ten_steps, tmp_path):
    result, _ = ten_steps
    path = tmp_path / "m.bin"
    save_checkpoint(result.model, result.optimizer, result.step, path)
    model, opt, step, header = load_checkpoint(path)
    assert step == 10 and header["version"] == 1
    for (k, a), (k2, b) in zip(result.model.state_dict().items(), model.state_dict().items()):
        assert k == k2 and torch.equal(a, b), k
    old = {id(p): n for n, p in result.model.named_parameters()}
    new = dict(model.named_parameters())
    for p, st in result.optimizer.state.items():
        st2 = opt.state[new[old[id(p)]]]
        assert torch.equal(st["exp_avg"], st2["exp_avg"]) and torch.equal(st["exp_avg_sq"], st2["exp_avg_sq"])
        assert float(st["step"]) == float(st2["step"])
    # and saving the loaded model reproduces the file byte for byte
    save_checkpoint(model, opt, step, tmp_path / "again.bin")
    assert (tmp_path / "again.bin").read_bytes() == path.read_bytes()


def test_checkpoint_namespaces(ten_steps, tmp_path):
    result, _ = ten_steps
    save_checkpoint(result.model, None, result.step, tmp_path / "m.bin")
    header, tensors = read_checkpoint(tmp_path / "m.bin")
    roots = {n.split("/")[0] for n in tensors}
    assert roots == {"frozen", "enhancement", "detection", "modulation", "qa"}
    assert header["optimizer"] is None


def test_truncated_checkpoint_is_rejected(ten_steps, tmp_path):
    result, _ = ten_steps
    path = tmp_path / "m.bin"
    save_checkpoint(result.model, result.optimizer, result.step, path)
    raw = path.read_bytes()
    for cut in (5, 40, len(raw) - 3):
        (tmp_path / "cut.bin").write_bytes(raw[:cut])
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "cut.bin")


def test_version_mismatch_is_rejected(ten_steps, tmp_path, monkeypatch):
    result, _ = ten_steps
    monkeypatch.setattr(trainer_mod, "CKPT_VERSION", 99)
    save_checkpoint(result.model, None, result.step, tmp_path / "v99.bin")
    monkeypatch.undo()
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "v99.bin")


def test_failed_save_leaves_no_file(ten_steps, tmp_path, monkeypatch):
    result, _ = ten_steps

    def boom(*a, **k):
        raise KeyboardInterrupt

    monkeypatch.setattr(trainer_mod.os, "replace", boom)
    with pytest.raises(KeyboardInterrupt):
        save_checkpoint(result.model, result.optimizer, result.step, tmp_path / "m.bin")
    assert list(tmp_path.iterdir()) == []


@pytest.mark.slow
def test_loss_decreases_on_default_run(full_run):
    totals = [r["total"] for r in full_run.result.log]
    assert np.mean(totals[90:100]) < np.mean(totals[:10])
    assert all(math.isfinite(t) for t in totals)
