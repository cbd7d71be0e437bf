"""Glue between the trained network, profile tables and metrics."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .dataio import CONTROL_LABELS, IndexRecord, load_images, load_index
from .model import PhenoNet, embed
from .profiles import ProfileTable


def site_table(records: list[IndexRecord], vectors: np.ndarray) -> ProfileTable:
    return ProfileTable("site", [r.plate for r in records], [r.well for r in records],
                        [r.site for r in records], [r.treatment for r in records],
                        [r.role for r in records], vectors)


def site_profiles(net: PhenoNet, data, batch_size: int = 32) -> ProfileTable:
    """Eval-mode embedding of every site image of a loaded dataset."""
    return site_table(data.records, embed(net, data.images, batch_size))


def embed_directory(net: PhenoNet, data_dir, batch_size: int = 32,
                    control_labels=CONTROL_LABELS) -> ProfileTable:
    """Embed every site listed in ``<data_dir>/index.csv``; no targets needed."""
    records = load_index(Path(data_dir) / "index.csv", control_labels)
    images = load_images(records, net.config.image_size)
    return site_table(records, embed(net, images, batch_size))
