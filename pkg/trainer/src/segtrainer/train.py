"""Training loops for the voxel descriptor models.

All loops are deterministic for a fixed config: they seed torch's generator,
run single threaded, and draw batches from a numpy generator seeded alongside.
"""

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import TrainingSample, TripletBatcher
from .errors import ConfigError, DataError
from .losses import batch_hard_loss
from .models import FusedEncoder, LidarEncoder, PatchStandIn

EMBED_CHUNK = 64


@dataclass
class TrainConfig:
    dim: int = 64
    margin: float = 0.2
    groups_per_batch: int = 8     # P: distinct groups in each batch
    samples_per_group: int = 4    # K: samples drawn from each group
    learning_rate: float = 1e-3
    epochs: int = 12
    steps_per_epoch: int = 0      # 0 means ceil(n_samples / batch size)
    seed: int = 0

    def validate(self) -> None:
        if self.dim < 1:
            raise ConfigError("dim must be positive")
        if self.margin <= 0:
            raise ConfigError("margin must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")


def _seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    torch.set_num_threads(1)


def voxel_batch(samples: list[TrainingSample], indices) -> torch.Tensor:
    grids = np.stack([samples[i].voxels for i in indices]).astype(np.float32)
    return torch.from_numpy(grids[:, None])


def _run_loop(model: torch.nn.Module, forward, samples: list[TrainingSample],
              cfg: TrainConfig) -> list[float]:
    """Shared optimizer loop; forward maps a list of sample indices to
    embeddings. Returns the mean loss of each epoch."""
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    batcher = TripletBatcher(samples, cfg.groups_per_batch,
                             cfg.samples_per_group, rng)
    batch_size = batcher.p * batcher.k
    steps = cfg.steps_per_epoch
    if steps <= 0:
        steps = max(1, -(-len(samples) // batch_size))
    losses = []
    for _ in range(cfg.epochs):
        total = 0.0
        for _ in range(steps):
            idx = batcher.next_indices()
            emb = forward(idx)
            groups = torch.tensor([samples[i].group for i in idx])
            loss = batch_hard_loss(emb, groups, cfg.margin)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach())
        losses.append(total / steps)
    return losses


def train_lidar_descriptor(samples: list[TrainingSample],
                           cfg: TrainConfig) -> tuple[LidarEncoder, list[float]]:
    cfg.validate()
    _seed_everything(cfg.seed)
    model = LidarEncoder(cfg.dim)

    def forward(idx):
        return model(voxel_batch(samples, idx))

    losses = _run_loop(model, forward, samples, cfg)
    return model, losses


def _image_vectors(samples: list[TrainingSample],
                   image_embeddings: dict | None,
                   stand_in_seed: int) -> np.ndarray:
    """One fixed vector per sample, either loaded from files or produced by the
    frozen patch network. These never receive gradients."""
    if image_embeddings is not None:
        rows = []
        for s in samples:
            if s.key not in image_embeddings:
                raise DataError(f"no image embedding for sample {s.key}")
            rows.append(np.asarray(image_embeddings[s.key], dtype=np.float32))
        mat = np.stack(rows)
        if mat.ndim != 2:
            raise DataError("image embeddings must be flat vectors")
        return mat
    stand_in = PatchStandIn(seed=stand_in_seed)
    vecs = []
    with torch.no_grad():
        for s in samples:
            if s.patch is None:
                raise DataError(f"sample {s.key} has no image patch and no "
                                "embedding file was supplied")
            patch = torch.from_numpy(s.patch)[None, None]
            vecs.append(stand_in(patch)[0].numpy())
    return np.stack(vecs)


def train_fused_descriptor(samples: list[TrainingSample], cfg: TrainConfig,
                           image_embeddings: dict | None = None,
                           ) -> tuple[FusedEncoder, list[float]]:
    """Fused model: only the voxel branch and the fusion head train; the image
    side enters as precomputed vectors."""
    cfg.validate()
    _seed_everything(cfg.seed)
    image_mat = _image_vectors(samples, image_embeddings, cfg.seed)
    # the fused output width is fixed by the architecture; cfg.dim sizes the
    # voxel branch feeding the fusion head
    model = FusedEncoder(image_dim=image_mat.shape[1], lidar_dim=cfg.dim)
    image_tensor = torch.from_numpy(image_mat)

    def forward(idx):
        return model(voxel_batch(samples, idx), image_tensor[list(idx)])

    losses = _run_loop(model, forward, samples, cfg)
    return model, losses


def embed_samples(model: torch.nn.Module, samples: list[TrainingSample],
                  image_embeddings: dict | None = None,
                  stand_in_seed: int = 0) -> dict[tuple[int, int], np.ndarray]:
    """Run the trained model over samples in evaluation mode."""
    fused = isinstance(model, FusedEncoder)
    image_tensor = None
    if fused:
        image_tensor = torch.from_numpy(
            _image_vectors(samples, image_embeddings, stand_in_seed))
    model.eval()
    out = {}
    with torch.no_grad():
        for start in range(0, len(samples), EMBED_CHUNK):
            idx = range(start, min(start + EMBED_CHUNK, len(samples)))
            batch = voxel_batch(samples, idx)
            if fused:
                emb = model(batch, image_tensor[list(idx)])
            else:
                emb = model(batch)
            for i, row in zip(idx, emb.numpy()):
                out[samples[i].key] = row.astype(np.float32)
    return out


def recall_at_1(embeddings: dict[tuple[int, int], np.ndarray],
                groups: dict[tuple[int, int], int]) -> float:
    """Fraction of samples whose nearest other sample shares their group."""
    keys = sorted(embeddings)
    if len(keys) < 2:
        raise DataError("recall@1 needs at least two embedded samples")
    mat = np.stack([embeddings[k] for k in keys]).astype(np.float64)
    d2 = np.sum(mat ** 2, axis=1)
    dist = d2[:, None] + d2[None, :] - 2.0 * (mat @ mat.T)
    np.fill_diagonal(dist, np.inf)
    nearest = np.argmin(dist, axis=1)
    hits = sum(1 for i, j in enumerate(nearest)
               if groups[keys[i]] == groups[keys[j]])
    return hits / len(keys)


def toy_benchmark(cfg: TrainConfig, n_classes: int = 20, per_class: int = 30,
                  per_class_test: int = 6, data_seed: int = 0) -> dict:
    """Train on the synthetic shape classes and score held-out recall@1."""
    from .data import make_toy_dataset, split_holdout

    samples = make_toy_dataset(data_seed, n_classes, per_class)
    train, test = split_holdout(samples, per_class_test)
    start = time.perf_counter()
    model, losses = train_lidar_descriptor(train, cfg)
    train_seconds = time.perf_counter() - start
    test_emb = embed_samples(model, test)
    recall = recall_at_1(test_emb, {s.key: s.group for s in test})
    return {
        "n_classes": n_classes,
        "n_train": len(train),
        "n_test": len(test),
        "epoch_losses": losses,
        "train_seconds": train_seconds,
        "holdout_recall_at_1": recall,
        "model": model,
        "test_embeddings": test_emb,
    }
