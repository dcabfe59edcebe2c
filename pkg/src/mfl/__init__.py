"""Averaging and fluctuation experiments for slow-fast systems driven by fractional Brownian motion.

Modules: ``fbm`` (fBM sampling, Holder norms), ``integrate`` (Young and Ito
sums, mixed SDEs), ``fastproc`` (fast process and its diagnostics), ``cell``
(Poisson problem and effective coefficients), ``multiscale`` (coupled
slow-fast simulation), ``limit`` (limiting fluctuation SDE), ``stats`` and
``experiments`` (ensembles and verdicts), ``cli`` (command-line entry point).
"""

__version__ = "0.1.0"
