"""Inference helpers and the held-out evaluation protocol."""
from __future__ import annotations

import datetime as _dt
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import DEFECT_LABELS, LABELS
from .errors import InputError
from .metrics import EvalReport, per_class_detection, qa_accuracy
from .model import WaferQAModel
from .qa import FACETS, Corpora, answer, build_corpora, fill_entry, grade_answer, load_heldout_general, sample_slots
from .trainer import encode_samples
from .wafersynth import WaferSample, blank_sample

QA_NOTES = {
    "pixel_auc": "pixels pooled over all test images of the class and the good images",
    "image_score": "maximum of the anomaly map",
    "pro": "fpr limit 0.3, 4-connected regions, overlap held constant from the last sweep point to the limit",
    "qa_overall": "unweighted mean of the six facet groups and the unrelated group",
}


@dataclass
class Prediction:
    anomaly_maps: np.ndarray  # (N, H, W)
    binary: np.ndarray
    probs: np.ndarray  # (N, C) PM softmax
    p_n: np.ndarray
    predicted: list[str]


@torch.no_grad()
def predict(model: WaferQAModel, samples: Sequence[WaferSample], chunk: int = 64) -> Prediction:
    model.eval()
    maps, bins, probs, p_n, pred = [], [], [], [], []
    for i in range(0, len(samples), chunk):
        part = samples[i:i + chunk]
        v_img, v_txt = encode_samples(model, part)
        det = model.detect(v_img, v_txt)
        maps.append(det.mask.anomaly_map.numpy())
        bins.append(det.mask.binary.numpy())
        probs.append(det.pm.softmax_p.numpy())
        p_n.append(det.pm.p_n.numpy())
        pred += [model.labels[int(k)] for k in det.pm.predicted]
    return Prediction(np.concatenate(maps), np.concatenate(bins), np.concatenate(probs),
                      np.concatenate(p_n), pred)


@torch.no_grad()
def ask(model: WaferQAModel, image: np.ndarray | None, text_marks: str, questions: Sequence[str],
        max_len: int | None = None) -> tuple[list[str], list[float]]:
    """Greedy answers for ``questions`` about one image (blank when None),
    with the gate value a of each turn. Blank-image turns use a = 0."""
    model.eval()
    if not questions:
        return [], []
    no_image = image is None
    if no_image:
        blank = blank_sample(model.cfg.gen)
        image, text_marks = blank.image, blank.text_marks
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (model.cfg.gen.height, model.cfg.gen.width):
        raise InputError(f"image shape {image.shape} does not match the model "
                         f"({model.cfg.gen.height}, {model.cfg.gen.width})")
    n = len(questions)
    v_img, v_txt = model.encode(image[None], [text_marks])
    det = model.detect(v_img.expand(n, -1, -1), v_txt.expand(n, -1, -1))
    q_ids, q_mask = model.encode_questions(questions)
    images = torch.as_tensor(image, dtype=torch.float32).expand(n, -1, -1)
    force = torch.zeros(n) if no_image else None
    ins, a, a_raw = model.instruction(det, images, q_ids, q_mask, force_gate=force)
    texts = answer(ins, model.lm, model.vocab, max_len or model.cfg.model.max_answer_tokens)
    shown = a_raw.clamp_min(0.0) if no_image else a
    return list(texts), [float(v) for v in shown]


def heldout_defect_questions(samples: Sequence[WaferSample], corpora: Corpora) -> list[dict]:
    """Six facets x four categories: one seen template per cell, rotated by
    category, asked about a test image of that category."""
    items = []
    for ci, cat in enumerate(DEFECT_LABELS):
        pool = [s for s in samples if s.label == cat]
        if not pool:
            raise InputError(f"no test images of class {cat}")
        for fi, facet in enumerate(FACETS):
            templates = [e for e in corpora.by_category[cat] if e.facet == facet]
            entry = templates[ci % len(templates)]
            sample = pool[(fi * 7 + ci) % len(pool)]
            question, _, expected = fill_entry(entry, sample_slots(sample, corpora))
            items.append({"group": facet, "sample": sample, "question": question, "expected": expected})
    return items


def heldout_unrelated_questions(samples: Sequence[WaferSample], path: str | Path | None = None) -> list[dict]:
    """Paraphrased general questions, each paired with a real defect image."""
    defect = [s for s in samples if s.label != "good"]
    if not defect:
        raise InputError("no defect test images")
    rows = load_heldout_general(path)
    return [{"group": "unrelated", "sample": defect[(k * 11) % len(defect)], "question": q,
             "expected": {"answer": a}} for k, (q, a) in enumerate(rows)]


def run_qa(model: WaferQAModel, items: Sequence[dict]) -> list[dict]:
    out = []
    for item in items:
        s = item["sample"]
        (text,), (a,) = ask(model, s.image, s.text_marks, [item["question"]])
        out.append({"group": item["group"], "sample_id": s.sample_id, "question": item["question"],
                    "answer": text, "expected": item["expected"], "gate": round(a, 6),
                    "correct": grade_answer(text, item["expected"])})
    return out


def pm_accuracy(pred: Prediction, samples: Sequence[WaferSample]) -> float:
    """Fraction of defect test images whose PM argmax is the true class."""
    hits = [p == s.label for p, s in zip(pred.predicted, samples) if s.label != "good"]
    if not hits:
        raise InputError("no defect images for PM accuracy")
    return float(np.mean(hits))


def checkpoint_id(path: str | Path | None) -> str:
    if path is None:
        return ""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def evaluate(model: WaferQAModel, samples: Sequence[WaferSample], *, oracle: bool = False,
             with_qa: bool = True, corpora: Corpora | None = None, ckpt: str | Path | None = None) -> EvalReport:
    pred = predict(model, samples)
    masks = np.stack([s.mask for s in samples])
    maps = masks.astype(np.float64) if oracle else pred.anomaly_maps
    labels = [s.label for s in samples]
    per_class, average = per_class_detection(maps, masks, labels, DEFECT_LABELS)
    report = EvalReport(per_class=per_class, average=average, pm_accuracy=pm_accuracy(pred, samples),
                        config=model.cfg.to_dict(), checkpoint_id=checkpoint_id(ckpt),
                        timestamp=_dt.datetime.now(_dt.timezone.utc).isoformat(), notes=dict(QA_NOTES))
    if oracle:
        report.notes["oracle"] = "ground-truth masks used as anomaly maps"
    if with_qa:
        corpora = corpora or build_corpora()
        items = heldout_defect_questions(samples, corpora) + heldout_unrelated_questions(samples)
        details = run_qa(model, items)
        report.qa = qa_accuracy((d["group"], d["correct"]) for d in details)
        report.qa_details = details
    return report


__all__ = ["Prediction", "predict", "ask", "evaluate", "run_qa", "heldout_defect_questions",
           "heldout_unrelated_questions", "pm_accuracy", "LABELS"]
