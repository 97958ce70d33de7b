"""hoirecon: hand-object reconstruction at desk scale.

Prior alignment (ICP with scale), attention-based point-cloud refinement
on a minimal reverse-mode tape, a kinematic hand with IK, synthetic scene
generation, and deterministic evaluation tooling.
"""

__version__ = "0.1.0"
