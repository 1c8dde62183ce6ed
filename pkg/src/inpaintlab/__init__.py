"""Desk-scale generative image inpainting with contextual reconstruction.

An attention-free coarse-to-fine generator is trained with hinge
adversarial and L1 losses plus an auxiliary contextual-reconstruction
objective that teaches the network to borrow content from the known
region. The package also ships a patch-borrowing attention baseline,
mask and texture generators, metrics, and a scaling benchmark.
"""

__version__ = "0.1.0"
