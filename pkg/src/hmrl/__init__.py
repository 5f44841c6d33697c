"""hmrl: a three-layer hierarchical meta-RL library on a small numpy autodiff engine.

Layers: recurrent task inference (``highlevel``), macro-action discovery via a
modified VAE (``intermediate``), and a PPO policy with a sign-matching
intrinsic reward (``lowlevel``).  ``envs`` provides seeded toy meta-task
suites, ``oracle`` the independent ground-truth checks, ``trainer`` the
training loop, and ``cli`` the command-line front end.
"""

__version__ = "0.1.0"
