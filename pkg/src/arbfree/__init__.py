"""Two-stage no-arbitrage term-structure engine: latent curve manifold plus penalised latent SDE."""

__version__ = "0.1.0"
