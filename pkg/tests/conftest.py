import copy
from pathlib import Path

import numpy as np
import pytest
import torch
import yaml

from diffprobe.config import DenoiserConfig, parse_experiment_config
from diffprobe.record import ImageRecord, LabeledImageSet
from diffprobe.schedule import build_schedule

TINY_MODEL = {
    "image_size": 8,
    "stage_channels": [8, 16],
    "encoder_blocks_per_stage": 1,
    "bottleneck_blocks": 1,
    "decoder_blocks_per_stage": 2,
    "attention_resolutions": [4],
    "groups": 4,
    "time_embed_dim": 16,
}

TINY_CONFIG = {
    "mode": "balanced",
    "seed": 0,
    "workers": 1,
    "dataset": {
        "source": "synthetic",
        "image_size": 8,
        "synthetic": {"k": 3, "n_per_class": 20},
    },
    "schedule": {"kind": "cosine", "T": 20},
    "weighting": {"kind": "minsnr", "gamma": 5.0},
    "sampler": {"kind": "squared_cosine", "variant": "mid_emphasis"},
    "model": TINY_MODEL,
    "train": {
        "epochs": 2,
        "batch_size": 16,
        "save_every": 1,
        "frechet_every": 2,
        "frechet_samples": 4,
        "frechet_ddim_steps": 2,
    },
    "probe": {"epochs": 5, "batch_size": 16},
    "sweep": {"timesteps": [1, 5, 10], "batch_size": 16},
    "cluster": {"runs": 2, "restarts": 2, "pca_images": 2},
}


@pytest.fixture
def tiny_config_dict(tmp_path):
    """
    A desk config scaled down to 8×8 images, two U-Net stages and T=20.

    Returned as a plain dict so tests can override single keys before
    validation.
    """
    config = copy.deepcopy(TINY_CONFIG)
    config["output_dir"] = str(tmp_path / "run")
    return config


@pytest.fixture
def tiny_config(tiny_config_dict):
    return parse_experiment_config(tiny_config_dict)


@pytest.fixture
def tiny_model_config() -> DenoiserConfig:
    return DenoiserConfig.model_validate(TINY_MODEL)


@pytest.fixture
def write_config(tmp_path):
    """Write a config dict as YAML and return its path."""

    def _write(config: dict, name: str = "config.yaml") -> Path:
        path = tmp_path / name
        path.write_text(yaml.safe_dump(config, sort_keys=False))
        return path

    return _write


@pytest.fixture
def cosine_schedule():
    return build_schedule("cosine", 1000)


@pytest.fixture
def image_set_factory():
    """
    Factory for small labeled image sets with deterministic pixels.

    Every image of class c is a flat field of intensity (c + 1)/(k + 1)
    plus a little seeded noise.
    """

    def _make(*, n_per_class: int = 4, k: int = 3, size: int = 8, seed: int = 0, prefix: str = "img"):
        rng = np.random.default_rng(seed)
        images, records = [], []
        for c in range(k):
            for i in range(n_per_class):
                level = (c + 1) / (k + 1)
                image = np.clip(level + 0.02 * rng.standard_normal((size, size)), 0.0, 1.0)
                images.append(image)
                records.append(ImageRecord(image_id=f"{prefix}_c{c}_{i:03d}", label=c))
        return LabeledImageSet(
            images=np.stack(images)[:, None].astype(np.float32),
            records=records,
            label_map={c: f"class_{c}" for c in range(k)},
        )

    return _make


@pytest.fixture
def oracle_denoiser():
    """
    Factory for a noise predictor that knows the clean image.

    Given x0 in model range it returns ε̂ = (x_t − √ᾱ_t·x0)/√(1−ᾱ_t), the
    exact noise under the forward process.
    """

    def _make(schedule, x0: torch.Tensor):
        def predict(xt: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
            ab = torch.from_numpy(schedule.alpha_bar[t.numpy() - 1]).to(xt.dtype)
            ab = ab.reshape(-1, *([1] * (xt.ndim - 1)))
            return (xt - ab.sqrt() * x0) / (1.0 - ab).sqrt()

        return predict

    return _make


@pytest.fixture(scope="session")
def finished_run(tmp_path_factory):
    """
    One complete tiny balanced run shared by the pipeline, report and CLI
    tests. Tests must not modify it; copy the directory first.
    """
    from diffprobe.pipeline import run_pipeline

    config = copy.deepcopy(TINY_CONFIG)
    config["output_dir"] = str(tmp_path_factory.mktemp("finished") / "run")
    config = parse_experiment_config(config)
    return config, run_pipeline(config)
