"""Multi-agent reach-avoid planning that stays robust when communication drops out.

Modules
-------
markov_game  factored Markov games, mixed-radix joint indices, dead sets
gridworld    navigation environments
occupancy    occupancy measures, baseline reach-avoid LP, policy extraction
synthesis    total-correlation bound and the convex-concave synthesis loop
infometrics  exact path distributions, KL lemmas, performance bounds
executor     Monte Carlo rollouts with imaginary play and intermittent links
cli          command line driver
"""
__version__ = "0.1.0"
