"""Exponential-moving-average teacher of the student network.

The teacher is a frozen structural copy of the student. Learnable parameters
follow ``shadow <- decay * shadow + (1 - decay) * student`` once per optimizer
step; normalization running statistics are copied verbatim so the teacher
stays usable in evaluation mode.
"""

from __future__ import annotations

import copy

import torch


class EmaTeacher:
    def __init__(self, student: torch.nn.Module, decay: float = 0.99):
        if not 0.0 <= decay < 1.0:
            raise ValueError(f"decay must lie in [0, 1), got {decay}")
        self.decay = decay
        self.step = 0
        self.model = copy.deepcopy(student)
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.model.eval()

    @property
    def shadow_params(self):
        return [p.data for p in self.model.parameters()]

    @torch.no_grad()
    def update(self, student: torch.nn.Module, decay: float | None = None) -> None:
        d = self.decay if decay is None else decay
        if not 0.0 <= d <= 1.0:
            raise ValueError(f"decay must lie in [0, 1], got {d}")
        shadow = list(self.model.parameters())
        live = list(student.parameters())
        if len(shadow) != len(live):
            raise ValueError(f"parameter count drift: teacher has {len(shadow)}, "
                             f"student has {len(live)}")
        for ps, pl in zip(shadow, live):
            if ps.shape != pl.shape:
                raise ValueError(f"parameter shape drift: {tuple(ps.shape)} vs "
                                 f"{tuple(pl.shape)}")
            ps.mul_(d).add_(pl.detach(), alpha=1.0 - d)
        # running stats (and other buffers) are copied, not averaged
        for bs, bl in zip(self.model.buffers(), student.buffers()):
            bs.copy_(bl)
        self.step += 1

    @torch.no_grad()
    def predict(self, x: torch.Tensor):
        """Evaluation-mode forward with the shadow parameters, gradient-detached."""
        self.model.eval()
        with torch.no_grad():
            out = self.model(x)
        if isinstance(out, tuple):
            return tuple(o.detach() for o in out)
        return out.detach()

    def state_dict(self):
        return self.model.state_dict()

    def load_state_dict(self, state):
        self.model.load_state_dict(state)
