"""Conservative distributional constrained policy optimization.

Safe-exploration reinforcement learning on desk-scale constrained MDPs:
categorical value distributions for reward and cost critics, conservative
action filtering, KL-regularized policy improvement, and PID-style Lagrange
multiplier control.
"""

__version__ = "0.1.0"
