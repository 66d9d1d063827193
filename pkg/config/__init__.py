"""
Configuration package for the UWB variational estimation toolkit.
Contains environment variables, settings, and the checked-in experiment config.
"""
