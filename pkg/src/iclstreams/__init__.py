"""In-context learning with associative memory and residual attention streams.

Submodules: ``tensor`` (autodiff), ``taskgen`` (object/label sequences),
``amicl`` (parameter-free associative memory), ``toy`` (two-layer model),
``lm`` (byte-level decoder), ``corpus``, ``trainer``, ``evalstats``,
``plotting`` and ``cli``.
"""

__version__ = "0.1.0"
