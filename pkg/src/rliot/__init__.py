"""Learning the semantics of a smart bulb's protocol with tabular RL."""

__version__ = "0.1.0"
