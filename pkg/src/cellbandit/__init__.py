"""Offline contextual-bandit optimization of cell configuration parameters.

Modules: ``ndmath`` (reverse-mode tape), ``simnet`` (synthetic network and
logging policy), ``datastore`` (logged data, splits, kNN augmentation),
``rewardnet`` (reward model and ensemble), ``actopt`` (projected gradient
ascent over actions), ``policynet`` (policy network, IPS, truncated
off-policy gradient) and ``bench`` (experiment harness and CLI).
"""

__version__ = "0.1.0"
