"""Two-branch image+text classifiers trained with mutual learning.

The package trains a small image branch and a small text branch side by
side.  Each branch can mimic its peer's predictions through a KL term (plain
or truncated so only positive knowledge transfers), exchange mid-network
information through a gated self-attention fusion block, and feed a shared
fusion head that classifies the superposed branch features.
"""

__version__ = "0.1.0"
