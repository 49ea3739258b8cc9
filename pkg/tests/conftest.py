import pytest

from codeprior_sr.degradation import DatasetConfig, ToyDataset, build_toy_dataset
from codeprior_sr.networks import NetConfig
from codeprior_sr.training import TrainConfig

TINY_NET = NetConfig(n_z=4, K=16, width=8, lq_width=8, d_k=4)


def tiny_config(**kw) -> TrainConfig:
    base = dict(
        net=TINY_NET,
        batch_size=2,
        patch_size=16,
        pretrain_steps=6,
        stage1_steps=6,
        stage2_steps=6,
        checkpoint_every=3,
        lr=1e-3,
        lr_disc=1e-3,
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_data")
    build_toy_dataset(DatasetConfig(n=10, size=32, seed=3), root, overwrite=True)
    return ToyDataset.load(root)


@pytest.fixture(scope="session")
def tiny_runs(tiny_data, tmp_path_factory):
    """Pretrain -> stage 1 -> stage 2 on the tiny config; returns the run directories."""
    from codeprior_sr.training import pretrain_codebook, train_stage1, train_stage2

    root = tmp_path_factory.mktemp("tiny_runs")
    cfg = tiny_config()
    pretrain_codebook(tiny_data, cfg, root / "pre")
    train_stage1(tiny_data, root / "pre" / "pretrain.ckpt", cfg, root / "s1")
    train_stage2(tiny_data, root / "s1" / "stage1.ckpt", cfg, root / "s2")
    return root
