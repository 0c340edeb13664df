"""Error taxonomy shared across the package.

Two families matter to callers (and to the CLI exit-code contract):
configuration problems (bad fields, missing files) and numeric failures
(non-convergence, unusable sample sizes, infeasible truncations).
"""


class ConfigError(ValueError):
    """Invalid configuration or arguments; the CLI maps this to exit code 2."""


class NumericError(RuntimeError):
    """A numeric invariant failed (non-convergence, ESS floor, bad truncation);
    the CLI maps this to exit code 3."""
