from __future__ import annotations

import torch
from torch import nn


class EmptySplitError(ValueError):
    pass


@torch.no_grad()
def evaluate_accuracy(model: nn.Module, split, batch_size: int = 500) -> float:
    """Top-1 accuracy (percent) over the whole split: one pass, no augmentation.

    ``split`` is a :class:`~ddbench.datahub.Split` or an ``(images, labels)`` pair.
    """
    if isinstance(split, tuple):
        images, labels = split
        n = len(labels)
        batches = ((images[i:i + batch_size], labels[i:i + batch_size]) for i in range(0, n, batch_size))
    else:
        n = len(split)
        batches = split.batches(batch_size)
    if n == 0:
        raise EmptySplitError("cannot evaluate on an empty test split")
    was_training = model.training
    model.eval()
    device = next(model.parameters()).device
    dtype = next(model.parameters()).dtype
    correct = 0
    for x, y in batches:
        pred = model(x.to(device=device, dtype=dtype)).argmax(1)
        correct += int((pred.cpu() == y).sum())
    model.train(was_training)
    return 100.0 * correct / n
