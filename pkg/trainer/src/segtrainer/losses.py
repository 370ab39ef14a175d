"""Batch-hard triplet loss.

Within one batch, every sample acts as an anchor; its hardest positive is the
farthest same-group sample and its hardest negative the nearest other-group
sample. The loss averages the hinged margin violations over all anchors:

    L = (1/|B|) sum_a [ m + max_p d(a, p) - min_n d(a, n) ]_+

with d the Euclidean distance.
"""

import torch

from .errors import DataError


def _pairwise_distances(embeddings: torch.Tensor) -> torch.Tensor:
    # cdist's matmul shortcut loses precision on near-duplicate rows; the exact
    # mode keeps the hand-computed fixtures reproducible to 1e-6
    return torch.cdist(embeddings, embeddings,
                       compute_mode="donot_use_mm_for_euclid_dist")


def _validate_groups(group_ids: torch.Tensor) -> None:
    uniq, counts = torch.unique(group_ids, return_counts=True)
    if len(uniq) < 2:
        raise DataError("batch-hard mining needs at least 2 groups in the batch")
    lonely = uniq[counts < 2]
    if len(lonely):
        raise DataError(f"group {int(lonely[0])} has a single member; "
                        "every anchor needs a positive")


def batch_hard_terms(embeddings: torch.Tensor,
                     group_ids: torch.Tensor,
                     margin: float) -> torch.Tensor:
    """Per-anchor hinged terms [m + max_pos - min_neg]_+ as a (B,) tensor."""
    if embeddings.ndim != 2:
        raise DataError(f"embeddings must be (batch, dim), got {tuple(embeddings.shape)}")
    if len(group_ids) != len(embeddings):
        raise DataError("one group id per embedding required")
    _validate_groups(group_ids)

    d = _pairwise_distances(embeddings)
    same = group_ids.unsqueeze(0) == group_ids.unsqueeze(1)
    eye = torch.eye(len(d), dtype=torch.bool, device=d.device)
    pos_mask = same & ~eye
    neg_mask = ~same

    hardest_pos = d.masked_fill(~pos_mask, float("-inf")).max(dim=1).values
    hardest_neg = d.masked_fill(~neg_mask, float("inf")).min(dim=1).values
    return torch.relu(margin + hardest_pos - hardest_neg)


def batch_hard_loss(embeddings: torch.Tensor,
                    group_ids: torch.Tensor,
                    margin: float) -> torch.Tensor:
    """Mean over anchors of the batch-hard terms; differentiable scalar."""
    return batch_hard_terms(embeddings, group_ids, margin).mean()
