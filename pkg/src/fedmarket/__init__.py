"""fedmarket — a desk-scale one-shot federated learning marketplace.

Model owners train locally and publish models through a content-addressed
store whose identifiers are registered on a simulated gas-metered ledger;
a model buyer retrieves the models, fuses them in a single round, scores
each owner's leave-one-out contribution and pays proportional token
rewards from a fixed escrowed budget.

Subsystems:

- :mod:`fedmarket.ledger`      deterministic single-node account ledger
- :mod:`fedmarket.contract`    CID-registry contract with escrow and payout
- :mod:`fedmarket.cidstore`    hash-addressed blob store
- :mod:`fedmarket.learner`     MLP training, evaluation, serialization
- :mod:`fedmarket.aggregator`  one-shot model fusion (naive / matched / ensemble)
- :mod:`fedmarket.incentives`  leave-one-out scoring and payment tables
- :mod:`fedmarket.marketplace` orchestration service (job state machine)
- :mod:`fedmarket.api`         HTTP facade over the service
- :mod:`fedmarket.cli`         command-line driver and seeded demo
"""

__version__ = "0.1.0"
