import pytest

from mmfsod.config import RunConfig


def tiny(**overrides) -> RunConfig:
    """A run small enough to train in well under a second per step."""
    base = dict(d=16, heads=2, rect_heads=2, rect_layers=1, n=2, k=2, n_categories=6,
                n_novel=2, images_per_category=8, height=4, width=4, steps=2, eval_every=2,
                eval_episodes=2, optimizer="adam", lr=1e-3)
    base.update(overrides)
    return RunConfig(**base)


@pytest.fixture
def tiny_config():
    return tiny
