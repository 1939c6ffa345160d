"""The assembled pipeline: frozen encoders, modal enhancement, detection,
modulation and the toy language model, with the ablation switches."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .config import LABELS, RunConfig
from .detection import DetectionHead, MaskProjector, MaskTensor, mask_from_logits
from .encoders import FrozenImageEncoder, FrozenTextEncoder, Vocabulary, label_strings
from .enhancement import PMOutput, PredictionModule, PromptExpert, apply_confidence, expert_branch_forward, init_expert
from .modulation import Corrector, Modulation, PromptInstruction, assemble_instruction, compute_gate
from .qa import ToyLM
from .wafersynth import reference_images

# checkpoint namespaces, in order
NAMESPACES = ("frozen", "enhancement", "detection", "modulation", "qa")


@dataclass
class DetectionOutput:
    pm: PMOutput | None
    t_img: torch.Tensor
    t_txt: torch.Tensor
    n_expert: int
    logits: torch.Tensor
    mask: MaskTensor
    t_mas: torch.Tensor


class WaferQAModel(nn.Module):
    def __init__(self, cfg: RunConfig, vocab: Vocabulary | None = None, calibrate: bool = True):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        m = cfg.model
        self.vocab = vocab or Vocabulary.default()
        self.labels = list(LABELS)
        g = (cfg.gen.height // m.patch_size, cfg.gen.width // m.patch_size)
        if g[0] != g[1]:
            raise ValueError("the token grid must be square")
        self.grid = g[0]

        reference = None
        if calibrate:
            # a seed stream disjoint from the dataset seeds
            reference = reference_images(cfg.gen, m.encoder_seed + 7919, m.calibration_per_class)
        self.frozen = nn.ModuleDict({
            "image": FrozenImageEncoder(cfg.gen.height, cfg.gen.width, m.dim, m.patch_size, m.stem_channels,
                                        seed=m.encoder_seed, reference_images=reference),
            "text": FrozenTextEncoder(self.vocab, m.dim, m.max_text_tokens, seed=m.encoder_seed),
        })
        self.register_buffer("v_lab_clip", self.frozen["text"].encode_labels(label_strings(self.labels)).detach())

        ne = m.n_expert
        self.enhancement = nn.ModuleDict({
            "pm": PredictionModule(m.dim),
            "image_expert": PromptExpert(torch.zeros(ne, m.dim), torch.zeros(ne, m.dim)),
            "text_expert": PromptExpert(torch.zeros(ne, m.dim), torch.zeros(ne, m.dim)),
        })
        self.detection = nn.ModuleDict({
            "head": DetectionHead(m.dim, tuple(m.decoder_widths)),
            "projector": MaskProjector(m.dim, self.grid),
        })
        self.modulation = nn.ModuleDict({
            "stack": Modulation(m.dim, m.llm_dim, m.d_k),
            "corrector": Corrector(m.llm_dim),
            "mask_adapter": nn.Linear(m.dim, m.llm_dim),
            "patch_embed": nn.Linear(m.patch_size * m.patch_size, m.llm_dim),
            "image_adapter": nn.Linear(m.dim, m.llm_dim),
        })
        max_len = (ne + self.grid ** 2) * 2 + m.max_question_tokens + m.max_answer_tokens + 2
        self.qa = nn.ModuleDict({
            "lm": ToyLM(len(self.vocab), m.llm_dim, m.llm_layers, m.llm_heads, max_len=max_len),
        })

    # -- switches -----------------------------------------------------------
    @property
    def ablation(self):
        return self.cfg.ablation

    @property
    def n_expert(self) -> int:
        return self.cfg.model.n_expert if self.ablation.use_experts else 0

    @property
    def lm(self) -> ToyLM:
        return self.qa["lm"]

    def param_groups(self) -> dict[str, list[nn.Parameter]]:
        """Trainable parameters split into the detector side and the language side."""
        groups = {"detector": [], "language": []}
        for ns in ("enhancement", "detection"):
            groups["detector"] += [p for p in getattr(self, ns).parameters() if p.requires_grad]
        for ns in ("modulation", "qa"):
            groups["language"] += [p for p in getattr(self, ns).parameters() if p.requires_grad]
        return groups

    # -- frozen features ---------------------------------------------------
    @torch.no_grad()
    def encode(self, images, texts: Sequence[str]) -> tuple[torch.Tensor, torch.Tensor]:
        x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
        return self.frozen["image"](x), self.frozen["text"](list(texts))

    @torch.no_grad()
    def guide_experts(self, v_img_clip: torch.Tensor, v_txt_clip: torch.Tensor, seed: int) -> None:
        """Initialise the prompt experts from pooled training features."""
        for name, v, s in (("image_expert", v_img_clip, seed), ("text_expert", v_txt_clip, seed + 1)):
            fresh = init_expert(v, self.cfg.model.n_expert, s)
            exp: PromptExpert = self.enhancement[name]
            exp.prompts.copy_(fresh.prompts)
            exp.guide_snapshot.copy_(fresh.guide_snapshot)
            exp.z.copy_(fresh.z)

    # -- detection stage ---------------------------------------------------
    def detect(self, v_img_clip: torch.Tensor, v_txt_clip: torch.Tensor) -> DetectionOutput:
        pm_out = self.enhancement["pm"](v_img_clip, self.v_lab_clip)
        v_img, v_txt = v_img_clip, v_txt_clip
        if self.ablation.use_pm:
            v_img, v_txt = apply_confidence(pm_out.p_n, v_img_clip, v_txt_clip)
        if self.ablation.use_experts:
            t_img = expert_branch_forward(self.enhancement["image_expert"], v_img)
            t_txt = expert_branch_forward(self.enhancement["text_expert"], v_txt)
        else:
            t_img, t_txt = v_img, v_txt
        logits = self.detection["head"](t_img, t_txt, self.n_expert)
        mask = mask_from_logits(logits)
        t_mas = self.detection["projector"](mask.anomaly_map)
        return DetectionOutput(pm_out, t_img, t_txt, self.n_expert, logits, mask, t_mas)

    @staticmethod
    def select(det: DetectionOutput, idx: torch.Tensor) -> DetectionOutput:
        """Rows ``idx`` of a batched detection output (PM output is dropped)."""
        mask = MaskTensor(det.mask.probs[idx], det.mask.binary[idx], det.mask.anomaly_map[idx])
        return DetectionOutput(None, det.t_img[idx], det.t_txt[idx], det.n_expert, det.logits[idx],
                               mask, det.t_mas[idx])

    # -- instruction ---------------------------------------------------------
    def encode_questions(self, questions: Sequence[str]) -> tuple[torch.Tensor, torch.Tensor]:
        n = self.cfg.model.max_question_tokens
        ids = [self.vocab.encode(q)[:n] or [self.vocab.unk_id] for q in questions]
        width = max(len(i) for i in ids)
        out = torch.full((len(ids), width), self.vocab.pad_id, dtype=torch.long)
        mask = torch.zeros(len(ids), width, dtype=torch.bool)
        for k, row in enumerate(ids):
            out[k, : len(row)] = torch.tensor(row)
            mask[k, : len(row)] = True
        return out, mask

    def visual_tokens(self, det: DetectionOutput) -> torch.Tensor:
        return self.modulation["stack"](det.t_img, det.t_mas, det.t_txt, self.ablation.use_qformer_stack)

    def gate(self, t_vis: torch.Tensor, t_que: torch.Tensor, que_mask: torch.Tensor):
        """(a, a_raw); a is identically 1 when the corrector is switched off."""
        if not self.ablation.use_corrector:
            one = t_vis.new_ones(t_vis.shape[:-2])
            return one, one
        return compute_gate(t_vis, t_que, self.modulation["corrector"], que_mask, return_raw=True)

    def instruction(self, det: DetectionOutput, images: torch.Tensor, q_ids: torch.Tensor,
                    q_mask: torch.Tensor, force_gate: torch.Tensor | None = None,
                    t_vis: torch.Tensor | None = None):
        """Returns (PromptInstruction, a, a_raw). ``force_gate`` overrides a per row
        where it is not NaN (blank-image rows use 0)."""
        t_que = self.lm.embed_tokens(q_ids)
        if self.ablation.instruction_format == "eq5_baseline":
            ps = self.cfg.model.patch_size
            x = torch.as_tensor(images, dtype=torch.float32)[:, None] - 0.5
            patches = F.unfold(x, ps, stride=ps).transpose(1, 2)
            x_tokens = self.modulation["patch_embed"](patches)
            img_tokens = self.modulation["image_adapter"](det.t_img)
            ins = assemble_instruction(None, None, None, t_que, "eq5_baseline", x_tokens=x_tokens,
                                       img_tokens=img_tokens, que_mask=q_mask)
            one = t_que.new_ones(t_que.shape[0])
            return ins, one, one
        if t_vis is None:
            t_vis = self.visual_tokens(det)
        a, a_raw = self.gate(t_vis, t_que, q_mask)
        if force_gate is not None:
            a = torch.where(torch.isnan(force_gate), a, force_gate)
        t_mas = self.modulation["mask_adapter"](det.t_mas)
        ins = assemble_instruction(a, t_vis, t_mas, t_que, "eq9_gated", que_mask=q_mask)
        return ins, a, a_raw
