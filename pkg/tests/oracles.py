"""Independent reference implementations shared by the unit and acceptance tests."""
import math

import torch
from torch import nn

from ddbench.datahub import normalize, quantize
from ddbench.synth import candidate_crops, recovery_objective
from ddbench.teachers import extract_bn_stats


def recovery_fd_error(teacher, bn_weight, probe=4, seed=0, eps=1e-6):
    """Max relative error of autograd pixel gradients vs central differences at random probes."""
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(4, 3, 32, 32, dtype=torch.float64, generator=g)
    y = torch.tensor([0, 1, 2, 3])
    stats = extract_bn_stats(teacher)
    model = teacher.model
    xg = x.clone().requires_grad_(True)
    total, _, _ = recovery_objective(model, xg, y, stats, bn_weight)
    (grad,) = torch.autograd.grad(total, xg)
    errs = []
    for _ in range(probe):
        idx = tuple(int(torch.randint(0, s, (1,), generator=g)) for s in x.shape)
        xp, xm = x.clone(), x.clone()
        xp[idx] += eps
        xm[idx] -= eps
        with torch.no_grad():
            fp = float(recovery_objective(model, xp, y, stats, bn_weight)[0])
            fm = float(recovery_objective(model, xm, y, stats, bn_weight)[0])
        fd = (fp - fm) / (2 * eps)
        errs.append(abs(fd - float(grad[idx])) / max(abs(fd), abs(float(grad[idx])), 1e-12))
    return max(errs)


def pairwise_oracle(losses, src, crop, keep):
    """Exhaustive: candidate i's rank is the number of candidates strictly better than it."""
    n = len(losses)
    key = [(losses[i], src[i], crop[i]) for i in range(n)]
    rank = [sum(1 for j in range(n) if key[j] < key[i]) for i in range(n)]
    return [i for r in range(keep) for i in range(n) if rank[i] == r]


class StepTeacher(nn.Module):
    """Piecewise-constant logits of the image mean: produces exact loss ties."""

    def __init__(self):
        super().__init__()
        self.w = nn.Parameter(torch.zeros(1))

    def forward(self, x):
        level = torch.round(x.mean((1, 2, 3)) * 2)
        ks = torch.arange(10, dtype=x.dtype)
        return -(level[:, None] - ks[None, :] + 1).abs() * 0.5


def select_oracle(teacher, train, cfg, ipc):
    spec = train.spec
    m = cfg.patches_per_image
    r = math.isqrt(m)
    imgs = []
    for c in range(spec.num_classes):
        crops, src, crop = candidate_crops(train, c, cfg)
        losses = []
        for x in crops:  # one at a time
            with torch.no_grad():
                losses.append(float(nn.functional.cross_entropy(teacher.model(x[None]), torch.tensor([c]))))
        keep = pairwise_oracle(losses, src, crop, ipc * m)
        kept = crops[keep]
        if m > 1:
            p = spec.resolution // r
            kept = nn.functional.interpolate(kept, size=(p, p), mode="bilinear", align_corners=False, antialias=True)
            rows = []
            for gi in range(ipc):
                grp = kept[gi * m:(gi + 1) * m]
                rows.append(torch.cat([torch.cat(list(grp[i * r:(i + 1) * r]), dim=2) for i in range(r)], dim=1))
            kept = torch.stack(rows)
        imgs.append(kept)
    out = torch.cat(imgs)
    return normalize(quantize(out, spec), spec)
