"""Headline acceptance checks. Each test prints one PASS/FAIL line with the
measured numbers, then asserts at the committed tolerance."""
import math

import numpy as np
import pytest
import torch

from waferqa.evaluate import evaluate
from waferqa.metrics import average_precision, image_auc, image_scores, pixel_auc, pro
from waferqa.modulation import attention_matrix, bidirectional_self_attention, compute_gate, cross_attention
from waferqa.objectives import cross_entropy, cross_entropy_probs, dice_loss, focal_loss
from waferqa.trainer import cosine_lr, load_checkpoint

from oracles import (ap_bruteforce, auc_pairwise, ce_logits_scalar, ce_probs_scalar, dice_scalar, eq6_scalar,
                     eq7_scalar, focal_scalar, pro_bruteforce)
from test_metrics import random_instance
from test_modulation import identity_corrector, kernels, t64
from test_objectives import analytic, central_diff


@pytest.fixture
def verdict(capsys):
    def report(name: str, checks: dict[str, bool], detail: str = "") -> None:
        ok = all(checks.values())
        failed = [k for k, v in checks.items() if not v]
        line = f"{'PASS' if ok else 'FAIL'} {name}" + (f" | {detail}" if detail else "")
        if failed:
            line += f" | failed: {', '.join(failed)}"
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return report


def test_metric_oracles(verdict):
    worst = {"image_auc": 0.0, "pixel_auc": 0.0, "pro": 0.0, "ap": 0.0}
    for seed in range(20):
        size = 8 + seed % 9  # 8..16
        maps, masks = random_instance(1000 + seed, n_maps=4, size=size, levels=None if seed % 2 else 6)
        masks[0] = 0
        scores, labels = image_scores(maps), masks.reshape(4, -1).any(1).astype(int)
        worst["image_auc"] = max(worst["image_auc"], abs(image_auc(scores, labels) - auc_pairwise(scores, labels)))
        worst["pixel_auc"] = max(worst["pixel_auc"], abs(pixel_auc(maps, masks) - auc_pairwise(maps, masks)))
        worst["pro"] = max(worst["pro"], abs(pro(maps, masks) - pro_bruteforce(maps, masks)))
        worst["ap"] = max(worst["ap"], abs(average_precision(maps, masks) - ap_bruteforce(maps, masks)))
    verdict("metric-oracle equivalence", {k: v <= 1e-9 for k, v in worst.items()},
            ", ".join(f"{k} max err {v:.1e}" for k, v in worst.items()))


def test_loss_correctness(verdict):
    t = lambda x: torch.tensor(x, dtype=torch.float64)  # noqa: E731
    m = t([[1, 0], [1, 1]])
    checks = {
        "focal 0.25 ln2": abs(float(focal_loss(t([[0.5]]))) - 0.25 * math.log(2)) <= 1e-12,
        "dice -0.5": abs(float(dice_loss(m, m)) + 0.5) <= 1e-7,
    }
    grad_ok = fwd_ok = True
    for seed in range(5):
        rng = np.random.default_rng(seed)
        p = rng.uniform(0.05, 0.95, (4, 4))
        y, y_hat = rng.random((4, 4)), (rng.random((4, 4)) > 0.5).astype(float)
        logits, target = rng.normal(size=(4, 4)), rng.integers(0, 4, 4)
        probs = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
        tgt = torch.tensor(target)
        fwd_ok &= abs(float(focal_loss(t(p))) - focal_scalar(p, 2.0)) <= 1e-12
        fwd_ok &= abs(float(dice_loss(t(y), t(y_hat))) - dice_scalar(y, y_hat)) <= 1e-12
        fwd_ok &= abs(float(cross_entropy(t(logits), tgt)) - ce_logits_scalar(logits.tolist(), target.tolist())) <= 1e-12
        fwd_ok &= abs(float(cross_entropy_probs(t(probs), tgt)) - ce_probs_scalar(probs.tolist(), target.tolist())) <= 1e-12
        for f, x in ((focal_loss, t(p)), (lambda v: dice_loss(v, t(y_hat)), t(y)),
                     (lambda z: cross_entropy(z, tgt), t(logits)), (lambda q: cross_entropy_probs(q, tgt), t(probs))):
            grad_ok &= bool(np.allclose(analytic(f, x), central_diff(f, x.clone()), rtol=1e-4, atol=1e-10))
    checks.update({"forward vs scalar oracles": fwd_ok, "gradients vs central differences": grad_ok})
    verdict("loss correctness", checks, "5 seeds, 4x4 inputs")


def test_modulation_fidelity(verdict):
    err6 = err7 = row_err = 0.0
    for seed in range(10):
        rng = np.random.default_rng(300 + seed)
        n = 2 + seed % 2
        k1, k2 = kernels(seed)
        t_img, t_mas = rng.normal(size=(n, 4)), rng.normal(size=(n, 4))
        got = bidirectional_self_attention(t64(t_img), t64(t_mas), t64(k1), t64(k2), 3).numpy()
        err6 = max(err6, float(np.abs(got - eq6_scalar(t_img.tolist(), t_mas.tolist(), k1.tolist(), k2.tolist(), 3)).max()))
        f_im, t_txt = rng.normal(size=(2, 4)), rng.normal(size=(n, 4))
        got = cross_attention(t64(f_im), t64(t_txt), t64(k1), t64(k2), 3).numpy()
        err7 = max(err7, float(np.abs(got - eq7_scalar(f_im.tolist(), t_txt.tolist(), k1.tolist(), k2.tolist(), 3)).max()))
        rows = attention_matrix(t64(f_im), t64(t_txt), t64(k1), t64(k2), 3).sum(-1)
        row_err = max(row_err, float((rows - 1).abs().max()))
    c = identity_corrector(4)
    t_vis = t64([[1.0, 2.0, 0.0, 0.0], [3.0, 0.0, 0.0, 0.0]])
    a_par = float(compute_gate(t_vis, t64([[4.0, 2.0, 0.0, 0.0]]), c))
    a_orth = float(compute_gate(t_vis, t64([[-1.0, 2.0, 0.0, 0.0], [0.0, 0.0, 5.0, 0.0]]), c))
    a_anti, raw = compute_gate(t_vis, t64([[-2.0, -1.0, 0.0, 0.0]]), c, return_raw=True)
    verdict("modulation equation fidelity", {
        "self-attention": err6 <= 1e-9, "cross-attention": err7 <= 1e-9, "row sums": row_err <= 1e-9,
        "gate parallel": abs(a_par - 1) <= 1e-12, "gate orthogonal": abs(a_orth) <= 1e-12,
        "gate antiparallel": abs(float(raw) + 1) <= 1e-12 and float(a_anti) == 0.0,
    }, f"self-attn err {err6:.1e}, cross-attn err {err7:.1e}, gate {a_par:.3f}/{a_orth:.3f}/{float(a_anti):.3f}")


@pytest.mark.slow
def test_desk_detection_run(verdict, full_run):
    avg, pm_acc = full_run.report.average, full_run.report.pm_accuracy
    verdict("scaled detection run", {
        "image_auc >= 0.95": avg["image_auc"] >= 0.95, "pixel_auc >= 0.90": avg["pixel_auc"] >= 0.90,
        "pm accuracy >= 0.95": pm_acc >= 0.95, "train time <= 30 min": full_run.seconds <= 1800,
    }, f"image_auc {avg['image_auc']:.4f}, pixel_auc {avg['pixel_auc']:.4f}, pm {pm_acc:.4f}, "
       f"train {full_run.seconds:.0f}s")


def _accuracy(report, unrelated: bool) -> tuple[float, int]:
    rows = [d["correct"] for d in report.qa_details if (d["group"] == "unrelated") == unrelated]
    return float(np.mean(rows)), len(rows)


@pytest.mark.slow
def test_modality_bias(verdict, full_run, baseline_run):
    gated, n_u = _accuracy(full_run.report, unrelated=True)
    naive, _ = _accuracy(baseline_run.report, unrelated=True)
    defect, n_d = _accuracy(full_run.report, unrelated=False)
    verdict("modality-bias ablation", {
        f"{n_u} unrelated, gated >= 0.90": n_u == 20 and gated >= 0.90,
        "baseline at least 0.30 lower": gated - naive >= 0.30,
        f"{n_d} defect questions, gated >= 0.85": n_d == 24 and defect >= 0.85,
    }, f"unrelated gated {gated:.3f} vs baseline {naive:.3f}, defect gated {defect:.3f}")


@pytest.mark.slow
def test_schedule_exactness(verdict, short_run):
    tags = "".join(r["tag"] for r in short_run.result.log)
    verdict("schedule exactness", {
        "300 steps": len(tags) == 300, "200 A": tags.count("A") == 200, "100 B": tags.count("B") == 100,
        "AAB order": tags == "AAB" * 100,
        "lr endpoints": cosine_lr(0, 300, short_run.cfg.train) == 1e-4 and cosine_lr(300, 300, short_run.cfg.train) == 1e-6,
    }, f"{tags.count('A')} A / {tags.count('B')} B")


@pytest.mark.slow
def test_determinism_and_persistence(verdict, full_run, repeat_run, dataset):
    model, _, step, _ = load_checkpoint(full_run.ckpt)
    same_weights = all(torch.equal(a, b) for a, b in
                       zip(full_run.result.model.state_dict().values(), model.state_dict().values()))
    again = evaluate(model, dataset.test, ckpt=full_run.ckpt)
    verdict("determinism and persistence", {
        "identical reports": full_run.report.comparable() == repeat_run.report.comparable(),
        "identical checkpoints": full_run.ckpt.read_bytes() == repeat_run.ckpt.read_bytes(),
        "bit-exact reload": same_weights and step == full_run.result.step,
        "reload reproduces eval": again.comparable() == full_run.report.comparable(),
    }, f"checkpoint {full_run.report.checkpoint_id}")


@pytest.mark.slow
def test_ablation_direction(verdict, full_run, bare_run):
    full, bare = full_run.report.average["pixel_auc"], bare_run.report.average["pixel_auc"]
    verdict("ablation monotonicity", {"bare pixel_auc <= full": bare <= full},
            f"pixel_auc bare {bare:.4f} vs full {full:.4f}")
