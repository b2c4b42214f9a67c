import json

import pytest


TOY_CONFIG = {
    "seed": 7,
    "embedder": {"raw_visual_dim": 32, "visual_tokens": 4, "raw_text_dim": 48,
                 "text_tokens": 5, "mlp_hidden": 32},
    "fusion": {"variant": "mex", "d_k": 16},
    "pipeline": {"window": 4, "epochs": 100, "batch_size": 8, "lr": 0.05,
                 "momentum": 0.9, "neg_margin": -0.1},
    "dataset": {"n_concepts": 4, "n_tracks": 10, "n_prompts": 4,
                "n_frames": 12, "n_windows": 32},
}


@pytest.fixture
def toy_config_file(tmp_path):
    path = tmp_path / "toy.json"
    path.write_text(json.dumps(TOY_CONFIG))
    return str(path)
