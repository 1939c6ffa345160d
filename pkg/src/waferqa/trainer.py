"""Joint training of every trainable part under the weighted total loss,
with the cosine schedule, the A/A/B corpus alternation, run logs and a
self-describing binary checkpoint."""
from __future__ import annotations

import dataclasses
import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import LABELS, RunConfig, TrainConfig, config_from_dict
from .encoders import Vocabulary
from .errors import ConfigError, FormatError, InputError, NumericError
from .model import NAMESPACES, WaferQAModel
from .modulation import PromptInstruction
from .objectives import (cross_entropy_probs, dice_loss, focal_loss_from_probs, gate_relevance_loss,
                         total_loss)
from .qa import Corpora, alternation_schedule, build_corpora, fill_entry, lm_loss, sample_slots
from .wafersynth import WaferSample, blank_sample

MAGIC = b"WAFERQA\x00"
CKPT_VERSION = 1
LOSS_TERMS = ("focal", "dice", "ce1", "ce2", "gate")


def cosine_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    if total_steps <= 0:
        raise InputError("cosine schedule needs total_steps >= 1")
    if not 0 <= step <= total_steps:
        raise InputError(f"step {step} outside [0, {total_steps}]")
    if step == 0:
        return cfg.lr_init
    if step == total_steps:
        return cfg.lr_final
    return cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) * (1.0 + math.cos(math.pi * step / total_steps))


def set_determinism(threads: int = 1) -> None:
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(max(1, int(threads)))


def build_model(cfg: RunConfig, vocab: Vocabulary | None = None) -> WaferQAModel:
    torch.manual_seed(cfg.train.seed)
    return WaferQAModel(cfg, vocab)


# -- data ------------------------------------------------------------------------

@dataclass
class TrainingData:
    images: torch.Tensor  # (N, H, W)
    masks: torch.Tensor  # (N, H, W) float {0, 1}
    labels: torch.Tensor  # (N,) index into LABELS
    v_img: torch.Tensor  # (N, G, D) frozen image features
    v_txt: torch.Tensor  # (N, T, D) frozen text-mark features
    slots: list[dict[str, str] | None]
    sample_labels: list[str]
    blank_img: torch.Tensor  # (G, D)
    blank_txt: torch.Tensor
    blank_image: torch.Tensor  # (H, W)
    filler: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.images.shape[0]


def encode_samples(model: WaferQAModel, samples: Sequence[WaferSample], chunk: int = 64):
    imgs, txts = [], []
    for i in range(0, len(samples), chunk):
        part = samples[i:i + chunk]
        v_img, v_txt = model.encode(np.stack([s.image for s in part]), [s.text_marks for s in part])
        imgs.append(v_img)
        txts.append(v_txt)
    return torch.cat(imgs), torch.cat(txts)


def prepare_data(model: WaferQAModel, samples: Sequence[WaferSample], corpora: Corpora) -> TrainingData:
    if not samples:
        raise InputError("no samples to train on")
    v_img, v_txt = encode_samples(model, samples)
    blank = blank_sample(model.cfg.gen)
    b_img, b_txt = model.encode(blank.image[None], [blank.text_marks])
    slots = [sample_slots(s, corpora) if s.label != "good" else None for s in samples]
    return TrainingData(
        images=torch.as_tensor(np.stack([s.image for s in samples]), dtype=torch.float32),
        masks=torch.as_tensor(np.stack([s.mask for s in samples]), dtype=torch.float32),
        labels=torch.tensor([LABELS.index(s.label) for s in samples]),
        v_img=v_img, v_txt=v_txt, slots=slots, sample_labels=[s.label for s in samples],
        blank_img=b_img[0], blank_txt=b_txt[0],
        blank_image=torch.as_tensor(blank.image, dtype=torch.float32),
        filler=filler_words(corpora),
    )


def plan_steps(n_train: int, cfg: TrainConfig) -> tuple[int, int]:
    """(A-batch count, total steps) so that the AAB pattern uses every A batch."""
    n_a = cfg.epochs * math.ceil(n_train / cfg.batch_size)
    return n_a, n_a + n_a // 2


def a_batches(n_train: int, cfg: TrainConfig, rng: np.random.Generator) -> list[np.ndarray]:
    out = []
    for _ in range(cfg.epochs):
        perm = rng.permutation(n_train)
        out += [perm[i:i + cfg.batch_size] for i in range(0, n_train, cfg.batch_size)]
    return out


# -- one step ----------------------------------------------------------------------

@dataclass
class StepBatch:
    tag: str
    idx: np.ndarray | None = None  # rows of TrainingData for A batches
    a_entries: list = field(default_factory=list)  # Corpus-A entries, qa_per_image per defect row
    b_entries: list = field(default_factory=list)  # Corpus-B entries (B questions or A-batch negatives)
    a_fill: list = field(default_factory=list)  # filler prefix per A question ("" for none)
    b_fill: list = field(default_factory=list)


def filler_words(corpora: Corpora) -> list[str]:
    words = set()
    for e in corpora.a + corpora.b:
        words.update(w for w in e.question_template.split() if "{" not in w)
    return sorted(words)


def _fillers(n: int, words: Sequence[str], p: float, rng: np.random.Generator) -> list[str]:
    out = []
    for _ in range(n):
        if p > 0 and rng.random() < p:
            out.append(" ".join(words[j] for j in rng.integers(len(words), size=rng.integers(1, 4))) + " ")
        else:
            out.append("")
    return out


def draw_batch(tag: str, idx, data: TrainingData, corpora: Corpora, cfg: TrainConfig,
               rng: np.random.Generator) -> StepBatch:
    k = cfg.qa_per_image
    if tag == "A":
        defect = [i for i in idx if data.slots[i] is not None]
        a_entries = []
        for i in defect:
            pool = corpora.by_category[data.sample_labels[i]]
            a_entries += [pool[j] for j in rng.choice(len(pool), size=min(k, len(pool)), replace=False)]
        negs = [corpora.b[j] for j in rng.integers(len(corpora.b), size=len(defect))]
        return StepBatch("A", np.asarray(idx), a_entries, negs,
                         _fillers(len(a_entries), data.filler, cfg.question_noise, rng),
                         _fillers(len(negs), data.filler, cfg.question_noise, rng))
    entries = [corpora.b[j] for j in rng.integers(len(corpora.b), size=cfg.batch_size * k)]
    return StepBatch("B", None, [], entries, [], _fillers(len(entries), data.filler, cfg.question_noise, rng))


def _answer_ids(model: WaferQAModel, answers: Sequence[str]) -> list[list[int]]:
    n = model.cfg.model.max_answer_tokens
    return [model.vocab.encode(a)[:n] + [model.vocab.eos_id] for a in answers]


def _gate_targets_loss(a_raw: torch.Tensor, target: float) -> torch.Tensor:
    # BCE on (1 + a_raw) / 2 so the gradient survives the clamp at 0
    return gate_relevance_loss(0.5 * (1.0 + a_raw), torch.full_like(a_raw, target))


def _stack_instructions(x: PromptInstruction, y: PromptInstruction) -> PromptInstruction:
    """Batch two instructions, right-padding the shorter prefix with masked rows."""
    n = max(x.n_rows, y.n_rows)
    toks, masks = [], []
    for ins in (x, y):
        km = ins.key_mask if ins.key_mask is not None else torch.ones(ins.tokens.shape[:-1], dtype=torch.bool)
        pad = n - ins.n_rows
        toks.append(torch.nn.functional.pad(ins.tokens, (0, 0, 0, pad)))
        masks.append(torch.nn.functional.pad(km, (0, pad), value=False))
    return PromptInstruction(torch.cat(toks), dict(x.block_spans), x.format_tag, torch.cat(masks))


def compute_losses(model: WaferQAModel, batch: StepBatch, data: TrainingData) -> dict[str, torch.Tensor]:
    zero = torch.zeros(())
    gamma = model.cfg.loss.gamma
    gated = model.ablation.instruction_format == "eq9_gated" and model.ablation.use_corrector
    terms = {k: zero for k in LOSS_TERMS}
    if batch.tag == "A":
        idx = torch.as_tensor(batch.idx, dtype=torch.long)
        det = model.detect(data.v_img[idx], data.v_txt[idx])
        target = data.masks[idx]
        terms["focal"] = focal_loss_from_probs(det.mask.probs, target, gamma)
        terms["dice"] = dice_loss(target, det.mask.anomaly_map)
        terms["ce1"] = cross_entropy_probs(det.pm.softmax_p, data.labels[idx])
        rows = [k for k, i in enumerate(batch.idx) if data.slots[i] is not None]
        if rows:
            per = len(batch.a_entries) // len(rows)
            rep = torch.tensor(rows).repeat_interleave(per)
            sub = model.select(det, rep)
            qa = [fill_entry(e, data.slots[batch.idx[k]]) for e, k in zip(batch.a_entries, rep.tolist())]
            q_ids, q_mask = model.encode_questions([f + q for f, (q, _, _) in zip(batch.a_fill, qa)])
            t_vis = model.visual_tokens(sub) if model.ablation.instruction_format == "eq9_gated" else None
            ins, _, a_raw = model.instruction(sub, data.images[idx][rep], q_ids, q_mask, t_vis=t_vis)
            answers = _answer_ids(model, [a for _, a, _ in qa])
            # general questions about the same defect images, answered as Corpus-B
            use_lm = model.cfg.train.negative_lm_loss
            if use_lm or gated:
                neg_rows = torch.tensor(rows)
                n_sub = model.select(det, neg_rows)
                n_ids, n_mask = model.encode_questions([f + e.question_template
                                                        for f, e in zip(batch.b_fill, batch.b_entries)])
                n_vis = model.visual_tokens(n_sub) if t_vis is not None else None
                n_ins, _, a_neg = model.instruction(n_sub, data.images[idx][neg_rows], n_ids, n_mask, t_vis=n_vis)
            if use_lm:
                ins = _stack_instructions(ins, n_ins)
                answers += _answer_ids(model, [e.answer_template for e in batch.b_entries])
            terms["ce2"] = lm_loss(ins, answers, model.lm, model.vocab)
            if gated:
                terms["gate"] = 0.5 * (_gate_targets_loss(a_raw, 1.0) + _gate_targets_loss(a_neg, 0.0))
    else:
        n = len(batch.b_entries)
        v_img = data.blank_img.expand(n, -1, -1)
        v_txt = data.blank_txt.expand(n, -1, -1)
        det = model.detect(v_img, v_txt)
        q_ids, q_mask = model.encode_questions([f + e.question_template
                                                for f, e in zip(batch.b_fill, batch.b_entries)])
        images = data.blank_image.expand(n, -1, -1)
        ins, _, a_raw = model.instruction(det, images, q_ids, q_mask, force_gate=torch.zeros(n))
        terms["ce2"] = lm_loss(ins, _answer_ids(model, [e.answer_template for e in batch.b_entries]),
                               model.lm, model.vocab)
        if gated:
            terms["gate"] = _gate_targets_loss(a_raw, 0.0)
    return terms


def make_optimizer(model: WaferQAModel, cfg: TrainConfig) -> torch.optim.AdamW:
    groups = [{"params": ps, "name": name, "lr": cfg.lr_init * cfg.lr_scale.get(name, 1.0)}
              for name, ps in model.param_groups().items() if ps]
    return torch.optim.AdamW(groups, lr=cfg.lr_init, betas=(cfg.beta1, cfg.beta2),
                             weight_decay=cfg.weight_decay)


def train_step(model: WaferQAModel, batch: StepBatch, data: TrainingData, optimizer, lr: float,
               step: int) -> dict[str, float]:
    cfg = model.cfg
    for group in optimizer.param_groups:
        group["lr"] = lr * cfg.train.lr_scale.get(group["name"], 1.0)
    model.train()
    terms = compute_losses(model, batch, data)
    try:
        loss = total_loss(terms["focal"], terms["dice"], terms["ce1"], terms["ce2"], cfg.loss, terms["gate"])
    except NumericError as exc:
        raise NumericError(f"{exc} at step {step}", term=exc.term, step=step) from None
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if cfg.train.grad_clip > 0:
        for group in optimizer.param_groups:  # per group, so Q&A gradients do not throttle detection
            torch.nn.utils.clip_grad_norm_(group["params"], cfg.train.grad_clip)
    optimizer.step()
    out = {k: float(v.detach()) for k, v in terms.items()}
    out["total"] = float(loss.detach())
    return out


# -- training loop --------------------------------------------------------------------

@dataclass
class TrainResult:
    model: WaferQAModel
    optimizer: torch.optim.Optimizer
    log: list[dict]
    step: int


def train(cfg: RunConfig, train_samples: Sequence[WaferSample], out_dir: str | Path | None = None,
          corpora: Corpora | None = None, max_steps: int | None = None, progress=None) -> TrainResult:
    cfg.validate()
    if cfg.train.epochs == 0:
        raise ConfigError("epochs = 0: nothing to train")
    set_determinism(cfg.train.threads)
    corpora = corpora or build_corpora()
    model = build_model(cfg)
    data = prepare_data(model, train_samples, corpora)
    model.guide_experts(data.v_img, data.v_txt, cfg.train.seed)
    optimizer = make_optimizer(model, cfg.train)

    rng = np.random.default_rng(cfg.train.seed)
    batches = a_batches(len(data), cfg.train, rng)
    _, total = plan_steps(len(data), cfg.train)
    if max_steps is not None:
        total = min(total, max_steps)
    schedule = alternation_schedule(total)

    log_fh = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "run_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
        log_fh = open(out / "train_log.jsonl", "w")
    log: list[dict] = []
    a_iter = iter(batches)
    try:
        for step, tag in enumerate(schedule):
            batch = draw_batch(tag, next(a_iter) if tag == "A" else None, data, corpora, cfg.train, rng)
            lr = cosine_lr(step, total, cfg.train)
            losses = train_step(model, batch, data, optimizer, lr, step)
            rec = {"step": step, "tag": tag, "lr": lr, **losses}
            log.append(rec)
            if log_fh:
                log_fh.write(json.dumps(rec) + "\n")
            if progress:
                progress(rec)
    finally:
        if log_fh:
            log_fh.close()
    if [r["tag"] for r in log] != schedule:
        raise RuntimeError("realised corpus tags differ from the alternation schedule")
    model.eval()
    return TrainResult(model, optimizer, log, len(log))


# -- checkpoint ---------------------------------------------------------------------------

def _ckpt_name(key: str) -> str:
    ns, _, rest = key.partition(".")
    if ns not in NAMESPACES and ns != "v_lab_clip":
        raise FormatError(f"parameter {key!r} outside the known namespaces")
    return f"{ns}/{rest}" if rest else f"frozen/{ns}"


def _state_key(name: str) -> str:
    if name == "frozen/v_lab_clip":
        return "v_lab_clip"
    return name.replace("/", ".", 1)


def _tensor_bytes(t: torch.Tensor) -> bytes:
    return t.detach().to(torch.float32).contiguous().numpy().astype("<f4", copy=False).tobytes()


def save_checkpoint(model: WaferQAModel, optimizer: torch.optim.Optimizer | None, step: int,
                    path: str | Path) -> None:
    """Flat binary: magic, u32 header length, JSON header, float32 LE payload.
    Written to a temporary file and renamed into place."""
    tensors: list[tuple[str, torch.Tensor]] = [(_ckpt_name(k), v) for k, v in model.state_dict().items()]
    opt_meta = None
    if optimizer is not None:
        names = {id(p): _ckpt_name(n) for n, p in model.named_parameters()}
        opt_meta = {"groups": [], "steps": {}}
        for group in optimizer.param_groups:
            opt_meta["groups"].append({"name": group["name"], "lr": group["lr"],
                                       "params": [names[id(p)] for p in group["params"]]})
            for p in group["params"]:
                st = optimizer.state.get(p)
                if not st:
                    continue
                opt_meta["steps"][names[id(p)]] = float(st["step"])
                tensors.append((f"optim/{names[id(p)]}/exp_avg", st["exp_avg"]))
                tensors.append((f"optim/{names[id(p)]}/exp_avg_sq", st["exp_avg_sq"]))
    entries, offset, blobs = [], 0, []
    for name, t in tensors:
        blob = _tensor_bytes(t)
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "version": CKPT_VERSION, "step": int(step), "config": model.cfg.to_dict(),
        "vocab": model.vocab.itos, "tensors": entries, "optimizer": opt_meta, "payload_bytes": offset,
    }
    head = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", len(head)))
            fh.write(head)
            for blob in blobs:
                fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < len(MAGIC) + 4 or raw[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path} is not a checkpoint")
    (n_head,) = struct.unpack("<I", raw[len(MAGIC): len(MAGIC) + 4])
    start = len(MAGIC) + 4
    if len(raw) < start + n_head:
        raise FormatError(f"{path} is truncated (header)")
    try:
        header = json.loads(raw[start: start + n_head])
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}") from exc
    if header.get("version") != CKPT_VERSION:
        raise FormatError(f"checkpoint version {header.get('version')} != {CKPT_VERSION}")
    payload = raw[start + n_head:]
    if len(payload) != header["payload_bytes"]:
        raise FormatError(f"{path} is truncated: payload {len(payload)} of {header['payload_bytes']} bytes")
    tensors = {}
    for e in header["tensors"]:
        arr = np.frombuffer(payload, dtype="<f4", count=e["nbytes"] // 4, offset=e["offset"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(np.float32).reshape(e["shape"]))
    return header, tensors


def load_checkpoint(path: str | Path, with_optimizer: bool = True):
    """Returns (model, optimizer or None, step, header)."""
    header, tensors = read_checkpoint(path)
    cfg = config_from_dict(header["config"])
    model = WaferQAModel(cfg, Vocabulary(header["vocab"]), calibrate=False)
    state = {}
    for name, t in tensors.items():
        if not name.startswith("optim/"):
            state[_state_key(name)] = t
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise FormatError(f"checkpoint does not match the model: {exc}") from exc
    model.eval()
    optimizer = None
    if with_optimizer and header.get("optimizer"):
        optimizer = make_optimizer(model, cfg.train)
        params = {_ckpt_name(n): p for n, p in model.named_parameters()}
        meta = header["optimizer"]
        for group, gmeta in zip(optimizer.param_groups, meta["groups"]):
            group["lr"] = gmeta["lr"]
        for name, st in meta["steps"].items():
            optimizer.state[params[name]] = {
                "step": torch.tensor(st),
                "exp_avg": tensors[f"optim/{name}/exp_avg"].clone(),
                "exp_avg_sq": tensors[f"optim/{name}/exp_avg_sq"].clone(),
            }
    return model, optimizer, int(header["step"]), header


def config_echo(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)
