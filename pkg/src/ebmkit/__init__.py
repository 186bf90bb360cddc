"""Fields-of-Experts energy-based priors for Bayesian inverse imaging.

Submodules:
    tensors     circular convolutions, DCT basis, patches, PSNR
    foe         the FoE energy, its derivatives and model files
    inverse     forward operators, likelihoods and the tempered posterior
    optimize    APGD, conjugate gradient, Adam
    samplers    MH, MALA, ULA, underdamped Langevin, HMC, latent Gibbs
    training    score matching and bilevel learning
    verify      finite-state oracles for posterior and kernel properties
    recon       MAP and MMSE reconstruction
    baselines   backprojection and smoothed TV
    cli         the ``ebmkit`` command
"""

__version__ = "0.1.0"
