"""Maximum-likelihood estimation for continuous-time hidden Markov models in white noise."""

__version__ = "0.1.0"
