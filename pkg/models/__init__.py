"""
Models package for the UWB variational estimation toolkit.
Contains trajectory and dataset types and the experiment configuration schemas.
"""
