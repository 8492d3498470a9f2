"""Shared test fixtures: the separable multi-identity tuning setup."""

from querytrack.ablate import separable_fixture
from querytrack.config import RunConfig


def separable_book_and_pool(config: RunConfig | None = None,
                            identities: int = 10, samples: int = 8,
                            sigma: float = 0.05, seed: int = 7):
    """A fresh book plus a pool of well-separated identity clusters.

    Each identity gets one appearance latent; pool samples are noisy image
    encodings of it, so identities form tight clusters that prompt tuning
    can align text embeddings to.
    """
    return separable_fixture(config or RunConfig(), identities=identities,
                             samples=samples, sigma=sigma, seed=seed)
