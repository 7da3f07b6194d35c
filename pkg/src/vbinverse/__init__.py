"""Hierarchical mean-field variational Bayes for linear inverse problems."""
