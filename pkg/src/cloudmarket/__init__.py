"""Deterministic simulator of a market-oriented cloud.

Datacenters run an SLA-driven allocation pipeline over virtual machines;
a global exchange lets consumers, brokers, and providers trade capacity
through periodic double auctions, alternating-offers negotiation, and
SLAs with lateness penalties. Every run is a pure function of
(scenario, master_seed).
"""

__version__ = "0.1.0"
