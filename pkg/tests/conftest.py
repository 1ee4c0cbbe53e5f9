import numpy as np
import pytest

from mfnrec.features import ChannelFieldSpec, EmbeddingBundle
from mfnrec.mfn import MFNModel
from mfnrec.centers import InterestCenters
from mfnrec.synthgen import WorldConfig, generate_dataset, generate_world

SMALL_WORLD = dict(n_items=40, n_categories=8, n_shops=8, n_brands=8, n_entities=16, n_contexts=3,
                   archetypes=4, users=60, seq_len=6, examples_per_user=6, test_fraction=0.5)


@pytest.fixture(scope="session")
def small_world():
    cfg = WorldConfig(**SMALL_WORLD, seed=3)
    catalog, users = generate_world(cfg)
    train, test = generate_dataset(catalog, users, cfg)
    return cfg, catalog, users, train, test


def make_mfn(cfg, dim=8, K=2, hidden=8, heads=2, seed=0, combination=True, aux_weight=0.0):
    bundle = EmbeddingBundle.create(cfg.vocab, dim, seed)
    rng = np.random.default_rng([seed, 99])
    channels = (ChannelFieldSpec(("cid",)), ChannelFieldSpec(("entities",)))
    centers = [InterestCenters.from_array(rng.normal(0.0, 0.5, size=(K, dim))) for _ in channels]
    return MFNModel(bundle, centers, cfg.users, cfg.n_contexts, channels, hidden=hidden, heads=heads,
                    head_hidden=(8, 4), combination=combination, aux_weight=aux_weight, seed=seed)


@pytest.fixture
def small_mfn(small_world):
    return make_mfn(small_world[0])


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
