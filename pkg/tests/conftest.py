"""Shared builders for small deterministic corpora used across test modules."""

import numpy as np
import pytest

from slidemil.dataio import DatasetManifest, ManifestEntry, SlideBag, SurvivalRecord


def make_bag(rng, n_patches, embed_dim, slide_id="s0", patient_id="p0"):
    x = rng.standard_normal((n_patches, embed_dim)).astype(np.float32)
    return SlideBag(slide_id=slide_id, patient_id=patient_id, embeddings=x)


def make_classification_corpus(rng, n_bags=12, embed_dim=8, n_patches=(5, 12),
                               n_classes=2):
    """Tiny labeled corpus with a fixed train/val/test split, no planted signal."""
    entries, bags = [], {}
    splits = ["train"] * (n_bags - 4) + ["val"] * 2 + ["test"] * 2
    for i in range(n_bags):
        sid = f"s{i:03d}"
        n = int(rng.integers(n_patches[0], n_patches[1] + 1))
        bags[sid] = make_bag(rng, n, embed_dim, sid, f"p{i:03d}")
        entries.append(ManifestEntry(slide_id=sid, patient_id=f"p{i:03d}",
                                     embedding_path=f"{sid}.emb", split=splits[i],
                                     label=int(i % n_classes)))
    return DatasetManifest(entries=entries, task="classification"), bags


def make_survival_corpus(rng, n_bags=12, embed_dim=8, n_patches=(5, 12)):
    entries, bags = [], {}
    splits = ["train"] * (n_bags - 4) + ["val"] * 2 + ["test"] * 2
    for i in range(n_bags):
        sid = f"s{i:03d}"
        n = int(rng.integers(n_patches[0], n_patches[1] + 1))
        bags[sid] = make_bag(rng, n, embed_dim, sid, f"p{i:03d}")
        rec = SurvivalRecord(time=float(rng.exponential(1.0) + 0.01), event=int(i % 2))
        entries.append(ManifestEntry(slide_id=sid, patient_id=f"p{i:03d}",
                                     embedding_path=f"{sid}.emb", split=splits[i],
                                     label=rec))
    return DatasetManifest(entries=entries, task="survival"), bags


@pytest.fixture
def rng():
    return np.random.default_rng(0)
