"""All SMILES VAE: SMILES tooling, a from-scratch autodiff engine, and a
multi-string variational autoencoder with latent property optimization."""

__version__ = '0.1.0'
