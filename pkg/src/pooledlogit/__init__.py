"""Logistic regression on outcome-stratified pooled covariates.

Subjects are randomly grouped into case pools and control pools; only the
per-pool sums of each model term are analysed. A coordinator/node protocol
produces those sums across horizontally partitioned data with chained masked
summation, so individual covariate values never leave their node.
"""

__version__ = "0.1.0"
