"""Multiple-imputation engine and Monte Carlo harness for randomized trials
with incomplete continuous outcomes.

Subpackage map:

- ``rng``      deterministic splittable random streams + distribution samplers
- ``regress``  OLS, Bayesian posterior draws, REML/GLS for the repeated-measures model
- ``trees``    CART and random-forest learners used as imputation engines
- ``datagen``  trial data generators and missingness mechanisms
- ``impute``   the MI engine: per-variable methods, by-arm MI, chained equations
- ``analyze``  ANCOVA and MMRM analysis models
- ``pool``     Rubin's rules with the Barnard-Rubin degrees of freedom
- ``metrics``  simulation performance measures with Monte Carlo errors
- ``harness``  scenario registry and the deterministic replication loop
- ``cli``      command-line interface (``trialimpute run`` / ``list-scenarios`` / ``plotdata``)
"""

__version__ = "0.1.0"
