import json

import numpy as np
import pytest

from mirnet.dataset import GeneratorConfig, generate
from mirnet.gat import GatConfig
from mirnet.losses import ConstraintKind, ConstraintRule
from mirnet.mae import MaeConfig
from mirnet.model import ModelConfig

EXCLUSIVE_RULES = [
    ConstraintRule(ConstraintKind.MUTUAL_EXCLUSION, 0, 1),
    ConstraintRule(ConstraintKind.MUTUAL_EXCLUSION, 0, 2),
    ConstraintRule(ConstraintKind.MUTUAL_EXCLUSION, 1, 2),
]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_mae():
    # 16x16 images, 4x4 grid of patch 4; 75% masking keeps 4 patches
    return MaeConfig(image_size=16, patch_size=4, embed_dim=8, depth=2, num_heads=2, decoder_embed_dim=8,
                     decoder_depth=1, decoder_num_heads=2, epochs=2, batch_size=8)


@pytest.fixture
def tiny_model(tiny_mae):
    return ModelConfig(num_labels=4, node_dim=8, head_hidden=8, encoder=tiny_mae,
                       gat=GatConfig(num_layers=2, num_heads=2, hidden_dim=3))


@pytest.fixture
def tiny_generator():
    return GeneratorConfig(num_labels=4, height=16, width=16, patch_size=4,
                           prevalence=[0.3, 0.25, 0.2, 0.4], rules=list(EXCLUSIVE_RULES), seed=7)


@pytest.fixture
def tiny_dataset(tiny_generator, tmp_path):
    return generate(tiny_generator, n_labeled=60, n_unlabeled=10, out_dir=tmp_path / "data", show_progress=False)


TINY_RUN = {
    "seed": 0,
    "data": {"n_labeled": 60, "n_unlabeled": 8},
    "generator": {"num_labels": 4, "height": 16, "width": 16, "patch_size": 4,
                  "prevalence": [0.3, 0.3, 0.25, 0.35],
                  "rules": [{"kind": "mutual_exclusion", "a": 0, "b": 1}]},
    "mae": {"image_size": 16, "patch_size": 4, "embed_dim": 8, "depth": 2, "num_heads": 2,
            "decoder_embed_dim": 8, "decoder_depth": 1, "decoder_num_heads": 2, "epochs": 1, "batch_size": 8},
    "model": {"node_dim": 8, "head_hidden": 8, "gat": {"num_heads": 2, "hidden_dim": 3}},
    "train": {"epochs": 2, "batch_size": 8},
    "boost": {"epochs": 1, "finetune_count": 2, "replace_count": 2},
}


@pytest.fixture
def tiny_config(tmp_path):
    """Run config for a CLI pipeline that finishes in seconds."""
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY_RUN))
    return path
