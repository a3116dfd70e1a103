"""Back-translation as wake-sleep inference in a generative model of bitext."""

__version__ = "0.1.0"
