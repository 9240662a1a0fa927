"""Copula-and-marginal normalizing flows with exact tail splicing.

Modules:

* ``grad``: tape-based reverse-mode differentiation and Adam.
* ``ddsf``: monotone deep dense sigmoidal flows on the real line.
* ``marginal``: univariate flows that agree with a tail belief outside a body interval.
* ``coupling`` / ``copula_flow``: Real NVP on R^2 conjugated to the unit square.
* ``cm_flow``: the composed model ``x = m(h(u))``.
* ``ref_copulas``: Clayton, Frank and Gumbel reference copulas.
* ``metrics``: grid JSD, uniformity statistics and NLL.
* ``tailbound``: Monte Carlo verification of tail and moment bounds for Lipschitz generators.
"""

__version__ = "0.1.0"
