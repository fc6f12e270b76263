"""Stability-aware navigation for bipedal robots on rough terrain.

Modules: ``terrain`` (elevation maps and patches), ``instability`` (the
instability oracle and learned model), ``traversability`` (risk-bounded
command maps and baseline scores), ``global_planner`` (TravRRT*),
``local_planner`` (LIP dynamics and MPC), ``simulator`` (closed-loop
episodes and benchmarks) and ``cli``.
"""

__version__ = "0.1.0"
