"""
Boundary-weighted domain-adaptive segmentation toolkit.

Desk-scale, framework-free implementation of boundary-weighted losses,
densely-connected residual segmentation networks, adversarial domain
adaptation and the surface-distance metric suite, exercised on synthetic
two-domain phantoms or any MetaImage volume data.
"""

__version__ = "1.0.0"

import sys
from pathlib import Path as _Path

# library modules import the sibling `utils` package
_root = str(_Path(__file__).resolve().parents[1])
if _root not in sys.path:
    sys.path.insert(0, _root)
