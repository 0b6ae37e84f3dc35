"""Coordinated scheduling of microgrids on a radial distribution feeder.

Library layout:

- network: feeder model, validation, per-unit ingestion
- powerflow: branch-flow relations, current linearization, exact load flow
- voltage_support: tariff zone oracle and its mixed-integer reformulation
- microgrid: storage, inverter capability, curtailment, local balances
- miqp: problem IR, convex solver, branch-and-bound / enumeration
- centralized: horizon-stacked problem assembly
- admm: fully distributed consensus coordination
- scenario: config and timeline ingestion
- harness: receding-horizon driver, comparisons, sweeps, plot data
"""

__version__ = "0.1.0"
