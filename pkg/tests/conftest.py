import pytest

from isoscan.train import TrainConfig


def tiny_config(out, **over) -> TrainConfig:
    d = {
        "model": {"channels": 4, "n_groups": 1, "n_blocks": 1, "state_size": 2, "embed_dim": 8,
                  "dwam_hidden": 4},
        "encoder": {"channels": 4, "n_blocks": 2, "embed_dim": 8},
        "moco": {"steps": 3, "parent_dims": [8, 16, 16], "crop": [4, 8, 8]},
        "stage2": {"epochs": 2, "steps_per_epoch": 2, "batch_size": 1, "crop": [8, 16, 16],
                   "val_crops": 1},
        "schedule": {"base_lr": 1e-3, "warmup_epochs": 0.5, "total_epochs": 2},
        "output_dir": str(out),
    }
    for k, v in over.items():
        d[k] = {**d.get(k, {}), **v} if isinstance(v, dict) else v
    return TrainConfig.from_dict(d)


@pytest.fixture
def tiny(tmp_path):
    return tiny_config(tmp_path)
