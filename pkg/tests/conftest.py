import numpy as np
import pytest

from slidergen.training import TrainConfig, model_config_for, train
from slidergen.world import WorldSpec, build_world, generate_dataset


@pytest.fixture(scope="session")
def small_spec():
    return WorldSpec(n_attributes=3, latent_dim=16, n_prompt_classes=4, identity_dim=4,
                     text_len=4, token_dim=16, world_seed=42)


@pytest.fixture(scope="session")
def small_world(small_spec):
    return build_world(small_spec)


@pytest.fixture(scope="session")
def default_world():
    return build_world(WorldSpec(world_seed=1))


@pytest.fixture(scope="session")
def tiny_run(small_world, tmp_path_factory):
    """A fast, genuinely trained checkpoint on the small world for
    service/CLI/metrics plumbing tests."""
    out = tmp_path_factory.mktemp("tiny_run")
    world_path = out / "world.json"
    small_world.spec.save(world_path)
    data_path = out / "data.csw"
    dataset = generate_dataset(small_world, 2000, data_path, rng_seed=7)
    cfg = TrainConfig(batch_size=64, total_steps=150, warmup_steps=20, schedule_T=20,
                      log_interval=25, seed=5, init_seed=5)
    model_cfg = model_config_for(small_world, cfg, blocks=1, dim=16, heads=4)
    result = train(small_world, dataset, model_cfg, cfg, out, run_name="tiny")
    return {
        "world": small_world,
        "world_path": world_path,
        "dataset": dataset,
        "dataset_path": data_path,
        "train_cfg": cfg,
        "result": result,
        "out_dir": out,
    }
