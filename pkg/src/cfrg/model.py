"""The CFRG network: teacher, student, recovery branch and segmentation head wired together."""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .config import Config
from .distill import cosine_distance, distill_loss, distill_weight
from .features import build_student, build_teacher
from .infer import recovery_similarity_map
from .recovery import RecoveryNet, recovery_loss, recovery_weight
from .seghead import SegHead, bce_loss, guide, total_loss


class CFRG(nn.Module):
    def __init__(self, cfg: Config):
        super().__init__()
        self.cfg = cfg
        self.teacher = build_teacher(cfg)
        channels = self.teacher.channels
        self.student = build_student(cfg, channels)
        self.recovery = RecoveryNet(channels) if cfg.use_recovery else None
        self.seg = SegHead(channels, cfg.model.seg_width) if cfg.use_segmentation else None

    def trainable_state_dict(self) -> dict[str, Tensor]:
        """Everything except the teacher; checkpoints never carry teacher weights."""
        return {k: v for k, v in self.state_dict().items() if not k.startswith("teacher.")}

    def load_trainable_state_dict(self, state: dict[str, Tensor]) -> None:
        missing, unexpected = self.load_state_dict(state, strict=False)
        missing = [k for k in missing if not k.startswith("teacher.")]
        if missing or unexpected:
            raise KeyError(f"checkpoint mismatch: missing={missing} unexpected={unexpected}")

    def trainable_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("teacher.") and p.requires_grad]

    def _hints(self, f_ta, f_sa, f_r):
        distances = cosine_distance(f_ta, f_sa)
        w_d = distill_weight(distances)
        w_r = recovery_weight(f_ta, f_r) if f_r is not None else None
        if self.cfg.loss.detach_hints:
            w_d = [w.detach() for w in w_d]
            w_r = None if w_r is None else [w.detach() for w in w_r]
        return distances, w_d, w_r

    def forward_train(self, x_n: Tensor, x_a: Tensor, mask: Tensor, lambda_bce: float | None = None) -> dict[str, Tensor]:
        cfg = self.cfg
        f_ta = self.teacher(x_a, "teacher_on_xa")
        f_sa = self.student(x_a)
        f_r = l_rec = None
        zero = x_a.new_zeros(())
        if self.recovery is not None:
            f_tn = self.teacher(x_n, "teacher_on_xn")
            f_r = self.recovery(f_ta)
            l_rec = recovery_loss(f_r, f_tn)
        distances, w_d, w_r = self._hints(f_ta, f_sa, f_r)
        l_dis = distill_loss(distances, mask, cfg.push_enabled, cfg.distill.clamp_push)
        l_bce = zero
        if self.seg is not None:
            g = guide(f_ta, w_d, w_r, hint_enabled=cfg.use_hint)
            logits = self.seg(g.in_s)
            l_bce = bce_loss(torch.sigmoid(logits), mask)
        weights = cfg.loss
        if lambda_bce is not None:
            weights = type(weights)(weights.lambda_dis, weights.lambda_rec, lambda_bce, weights.detach_hints)
        l_rec = zero if l_rec is None else l_rec
        l_all = total_loss(l_dis, l_rec, l_bce, weights)
        return {"l_all": l_all, "l_dis": l_dis, "l_rec": l_rec, "l_bce": l_bce}

    @torch.no_grad()
    def forward_infer(self, image: Tensor) -> dict[str, Tensor]:
        """Per-pixel maps at input resolution: recovery distance, segmentation probability, raw sum."""
        size = image.shape[-2:]
        f_t = self.teacher(image)
        f_s = self.student(image)
        f_r = self.recovery(f_t) if self.recovery is not None else None
        distances, w_d, w_r = self._hints(f_t, f_s, f_r)
        out = {}
        if f_r is not None:
            out["rec_map"] = recovery_similarity_map(f_t, f_r, size)
        if self.seg is not None:
            g = guide(f_t, w_d, w_r, hint_enabled=self.cfg.use_hint)
            out["seg_prob"] = torch.sigmoid(self.seg(g.in_s))[:, 0]
        out["distill_map"] = torch.stack(
            [F.interpolate(d[:, None], size=size, mode="bilinear", align_corners=False)[:, 0] for d in distances]
        ).mean(0)
        zeros = image.new_zeros(image.shape[0], *size)
        out["fused"] = out.get("rec_map", zeros) + out.get("seg_prob", zeros)
        return out
