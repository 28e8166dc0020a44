import numpy as np
import pytest

from outfitxai.grader import GraderConfig, init_model
from outfitxai.imagefeat import FeatureConfig
from outfitxai.outfit import PARTS, ItemFeatures, Outfit

SMALL_GRID = 4  # 16-d edge descriptors keep finite-difference checks cheap


def small_config(k=(5,), g=(6,), h=7, batchnorm=False, edge_dim=SMALL_GRID ** 2) -> GraderConfig:
    return GraderConfig(k_widths=tuple(k), g_widths=tuple(g), h_width=h, batchnorm=batchnorm, edge_dim=edge_dim)


def small_model(seed=0, zero_bias=False, **kw):
    cfg = small_config(**kw)
    return init_model(cfg, seed, FeatureConfig(grid=int(round(cfg.edge_dim ** 0.5))), zero_bias=zero_bias)


def random_item(rng, edge_dim=SMALL_GRID ** 2, item_id=None) -> ItemFeatures:
    return ItemFeatures(rng.uniform(0, 1, edge_dim), rng.uniform(1, 2, 9), item_id)


def random_outfit(rng, edge_dim=SMALL_GRID ** 2, n=None, oid="o") -> Outfit:
    n = int(rng.integers(1, len(PARTS) + 1)) if n is None else n
    parts = sorted(rng.choice(len(PARTS), size=n, replace=False))
    return Outfit({PARTS[p]: random_item(rng, edge_dim, f"{PARTS[p]}-{oid}") for p in parts}, oid)


def random_outfits(rng, count, edge_dim=SMALL_GRID ** 2, n=None):
    return [random_outfit(rng, edge_dim, n, f"o{k:04d}") for k in range(count)]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
