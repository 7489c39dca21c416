import pytest

from freshfunnel.world import WorldConfig


@pytest.fixture
def small_world_config() -> WorldConfig:
    return WorldConfig(n_users=300, n_providers=20, upload_rate_mean=3.0, catalog_per_provider=10.0)
